mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stdgrl_core::data::synthetic::SyntheticSpec;

use commands::Predictor;
use config::ExperimentConfig;
use error::CliError;

/// Metro passenger-flow forecasting with a graph-recurrent and transformer model.
#[derive(Parser)]
#[command(name = "stdgrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the config's data; writes checkpoint, log and test report.
    Train {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the test-split metrics of a checkpoint or a baseline as JSON.
    Eval {
        config: PathBuf,
        /// Checkpoint to evaluate (not needed with --baseline).
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Also write per-entry predictions as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference check of every parameter group's gradient.
    Gradcheck {
        /// Experiment config; without it a tiny built-in model is checked.
        config: Option<PathBuf>,
        /// Node count (defaults to the data file's station count).
        #[arg(long)]
        nodes: Option<usize>,
        /// Corrupt one op's backward rule, to confirm the check notices.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[arg(long, env = "STDGRL_SEED")]
        seed: Option<u64>,
    },
    /// Write the learned adjacency of a checkpoint as an N x N CSV.
    ExportGraph {
        checkpoint: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic flow file.
    MakeSynthetic {
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        spec: SyntheticArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Historical Average.
    Ha,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, env = "STDGRL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, env = "STDGRL_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 8)]
    stations: usize,
    #[arg(long, default_value_t = 20)]
    days: usize,
    #[arg(long, default_value_t = 15)]
    interval_minutes: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "2024-01-01T00:00:00")]
    start: String,
    /// Noise standard deviation relative to the daily swing.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Largest per-day relative trend.
    #[arg(long, default_value_t = 0.03)]
    max_trend: f64,
}

fn load(path: &PathBuf, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(dir) = &overrides.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, overrides } => commands::train_cmd(&load(&config, &overrides)?),
        Command::Eval {
            config,
            checkpoint,
            baseline,
            predictions,
            overrides,
        } => {
            let config = load(&config, &overrides)?;
            let predictor = match (baseline, checkpoint) {
                (Some(Baseline::Ha), _) => Predictor::HistoricalAverage,
                (None, Some(path)) => Predictor::Model(path),
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::eval_cmd(&config, predictor, predictions.as_deref())
        }
        Command::Gradcheck {
            config,
            nodes,
            inject_fault,
            seed,
        } => {
            let mut model_config = match config {
                None => commands::tiny_gradcheck_config(0),
                Some(path) => {
                    let config = ExperimentConfig::load(&path)?;
                    let n = match nodes {
                        Some(n) => n,
                        None => config.prepare()?.dataset.num_stations(),
                    };
                    config.model_config(n)
                }
            };
            if let Some(n) = nodes {
                model_config.num_nodes = n;
            }
            if let Some(s) = seed {
                model_config.seed = s;
            }
            let fault = inject_fault.map(|op| &*Box::leak(op.into_boxed_str()));
            commands::gradcheck_cmd(model_config, fault)
        }
        Command::ExportGraph { checkpoint, output } => commands::export_graph_cmd(&checkpoint, output.as_deref()),
        Command::MakeSynthetic { output, spec } => {
            let spec = SyntheticSpec {
                stations: spec.stations,
                days: spec.days,
                interval_minutes: spec.interval_minutes,
                seed: spec.seed,
                start: spec.start,
                noise: spec.noise,
                max_trend: spec.max_trend,
            };
            commands::make_synthetic_cmd(&spec, &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
