use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use stdgrl_core::autodiff::Tensor;
use stdgrl_core::data::synthetic::{generate, SyntheticSpec};
use stdgrl_core::data::{write_flow_file, FlowDataset, SampleWindow, CHANNELS};
use stdgrl_core::model::{load_checkpoint, save_checkpoint, Architecture, ModelConfig, StdgrlModel};
use stdgrl_core::train::{evaluate, evaluate_ha, predict_windows, random_gradcheck, train, HistoricalAverage, MetricsReport};

use crate::config::{ExperimentConfig, Prepared};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Largest node count `gradcheck` accepts.
pub const GRADCHECK_MAX_NODES: usize = 8;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-6;

fn report_text(report: &MetricsReport) -> String {
    report.to_json_pretty() + "\n"
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn train_cmd(config: &ExperimentConfig) -> Result<(), CliError> {
    let Prepared { dataset, split, stats } = config.prepare()?;
    let mut model = StdgrlModel::new(config.model_config(dataset.num_stations()))?;
    fs::create_dir_all(&config.output_dir).map_err(|e| CliError::io(&config.output_dir, e))?;

    let log_path = config.output_dir.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log_error = None;
    eprintln!(
        "training {} parameters on {} windows ({} val, {} test)",
        model.num_parameters(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let outcome = train(
        &mut model,
        &split.train,
        &split.val,
        &stats,
        &config.train,
        dataset.interval_minutes,
        |entry| {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            eprintln!("{line}");
            if let Err(e) = writeln!(log, "{line}") {
                log_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_error {
        return Err(CliError::io(&log_path, e));
    }
    eprintln!("kept epoch {} (val MAE {})", outcome.best_epoch, outcome.best_val_mae);

    let ckpt = config.output_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt).map_err(|e| CliError::checkpoint(&ckpt, e))?;
    let report = evaluate(&model, &split.test, &stats, dataset.interval_minutes)?;
    let text = report_text(&report);
    write_file(&config.output_dir.join(REPORT_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Loads `path` and checks it against the registry `config` would build.
fn load_matching(path: &Path, config: &ModelConfig) -> Result<StdgrlModel, CliError> {
    let model = load_checkpoint(path).map_err(|e| CliError::checkpoint(path, e))?;
    let expected = StdgrlModel::new(config.clone())?;
    let c = &model.config;
    if (c.num_nodes, c.input_len, c.output_len) != (config.num_nodes, config.input_len, config.output_len) {
        return Err(CliError::Validation(format!(
            "{}: checkpoint expects N={}, T={}, m={} but the config gives N={}, T={}, m={}",
            path.display(),
            c.num_nodes,
            c.input_len,
            c.output_len,
            config.num_nodes,
            config.input_len,
            config.output_len
        )));
    }
    let mismatch = model
        .params
        .iter()
        .map(|(n, t)| (n, t.shape()))
        .zip(expected.params.iter().map(|(n, t)| (n, t.shape())))
        .find(|(a, b)| a != b);
    if let Some(((got, got_shape), (want, want_shape))) = mismatch {
        return Err(CliError::Validation(format!(
            "{}: parameter {got} {got_shape:?} does not match the config's {want} {want_shape:?}",
            path.display()
        )));
    }
    if model.params.len() != expected.params.len() {
        return Err(CliError::Validation(format!(
            "{}: checkpoint holds {} parameters, the config registers {}",
            path.display(),
            model.params.len(),
            expected.params.len()
        )));
    }
    Ok(model)
}

pub enum Predictor {
    Model(PathBuf),
    HistoricalAverage,
}

pub fn eval_cmd(config: &ExperimentConfig, predictor: Predictor, predictions: Option<&Path>) -> Result<(), CliError> {
    let Prepared { dataset, split, stats } = config.prepare()?;
    let mut test = split.test.clone();
    test.sort_by_key(|w| w.t_origin);
    let interval = dataset.interval_minutes;
    let (report, preds) = match predictor {
        Predictor::Model(path) => {
            let model = load_matching(&path, &config.model_config(dataset.num_stations()))?;
            let report = evaluate(&model, &test, &stats, interval)?;
            let preds = match predictions {
                Some(_) => predict_windows(&model, &test, &stats)?,
                None => Vec::new(),
            };
            (report, preds)
        }
        Predictor::HistoricalAverage => {
            let ha = HistoricalAverage::fit(&dataset, split.train_end())?;
            let report = evaluate_ha(&ha, &dataset, &test, interval)?;
            (report, test.iter().map(|w| ha.predict_window(w)).collect())
        }
    };
    if let Some(path) = predictions {
        write_file(path, predictions_csv(&dataset, &test, &preds).as_bytes())?;
    }
    print!("{}", report_text(&report));
    Ok(())
}

fn predictions_csv(dataset: &FlowDataset, windows: &[SampleWindow], preds: &[Tensor]) -> String {
    let mut out = String::from("t_origin,horizon_step,station_id,channel,y_true,y_pred\n");
    let n = dataset.num_stations();
    for (w, p) in windows.iter().zip(preds) {
        for k in 0..w.output_len() {
            for (s, id) in dataset.station_ids.iter().enumerate() {
                for (c, name) in ["in", "out"].iter().enumerate() {
                    let i = (k * n + s) * CHANNELS + c;
                    writeln!(out, "{},{},{id},{name},{},{}", w.t_origin, k + 1, w.y.data()[i], p.data()[i])
                        .expect("writing to a string");
                }
            }
        }
    }
    out
}

/// Small model used when `gradcheck` runs without a config.
pub fn tiny_gradcheck_config(seed: u64) -> ModelConfig {
    let arch = Architecture {
        embed_dim: 2,
        napl_dim: 2,
        hidden: 4,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        ..Default::default()
    };
    ModelConfig::new(4, 3, 2, arch, seed)
}

/// Parameter group: the first two dotted components of a name.
fn group_of(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

pub fn gradcheck_cmd(model_config: ModelConfig, fault: Option<&'static str>) -> Result<(), CliError> {
    if model_config.num_nodes > GRADCHECK_MAX_NODES {
        return Err(CliError::Validation(format!(
            "gradcheck perturbs every parameter entry and is limited to N <= {GRADCHECK_MAX_NODES}; got N = {}",
            model_config.num_nodes
        )));
    }
    let seed = model_config.seed;
    let model = StdgrlModel::new(model_config)?;
    let errors = random_gradcheck(&model, 2, seed, GRADCHECK_STEP, fault)?;
    let mut groups: Vec<(&str, f64)> = Vec::new();
    for (name, err) in &errors {
        let g = group_of(name);
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, worst)) => *worst = worst.max(*err),
            None => groups.push((g, *err)),
        }
    }
    let mut failed = Vec::new();
    for (g, err) in &groups {
        let ok = *err < GRADCHECK_TOLERANCE;
        println!("{g:<12} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(*g);
        }
    }
    if failed.is_empty() {
        println!("all {} groups below {GRADCHECK_TOLERANCE:e}", groups.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn export_graph_cmd(checkpoint: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint).map_err(|e| CliError::checkpoint(checkpoint, e))?;
    let Some(adj) = model.adjacency() else {
        let why = if model.config.arch.use_gru_branch {
            "it uses the static line graph, so there is no learned adjacency to export"
        } else {
            "it has no graph branch"
        };
        return Err(CliError::Validation(format!("{}: {why}", checkpoint.display())));
    };
    let n = adj.shape()[0];
    let mut csv = String::new();
    for row in adj.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    match output {
        Some(path) => write_file(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn make_synthetic_cmd(spec: &SyntheticSpec, output: &Path) -> Result<(), CliError> {
    let (dataset, _) = generate(spec).map_err(|e| CliError::Validation(e.to_string()))?;
    write_flow_file(&dataset, output).map_err(|e| CliError::data(output, e))?;
    eprintln!(
        "wrote {} rows x {} stations to {}",
        dataset.num_steps(),
        dataset.num_stations(),
        output.display()
    );
    Ok(())
}
