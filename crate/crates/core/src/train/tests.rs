use super::*;
use crate::data::synthetic::{generate, SyntheticSpec};
use crate::data::{chronological_split, make_windows, zscore_fit, Split, SplitSpec, WindowSpec};
use crate::model::{Architecture, ModelConfig};

fn tiny_arch() -> Architecture {
    Architecture {
        embed_dim: 2,
        napl_dim: 2,
        hidden: 4,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        ..Default::default()
    }
}

struct Fixture {
    split: Split,
    stats: NormalizationStats,
}

fn fixture(days: usize) -> Fixture {
    let (ds, _) = generate(&SyntheticSpec {
        stations: 3,
        days,
        interval_minutes: 60,
        ..Default::default()
    })
    .unwrap();
    let windows = make_windows(&ds, WindowSpec { input_len: 4, output_len: 2, stride: 1 }).unwrap();
    let split = chronological_split(windows, &SplitSpec::default(), &ds).unwrap();
    let width = ds.num_stations() * CHANNELS;
    let stats = zscore_fit(&ds.flows.data()[..split.train_end() * width]).unwrap();
    Fixture { split, stats }
}

fn tiny_model(seed: u64) -> StdgrlModel {
    StdgrlModel::new(ModelConfig::new(3, 4, 2, tiny_arch(), seed)).unwrap()
}

fn run(model: &mut StdgrlModel, f: &Fixture, config: &TrainConfig) -> TrainOutcome {
    train(model, &f.split.train, &f.split.val, &f.stats, config, 60, |_| {}).unwrap()
}

#[test]
fn patience_zero_runs_one_epoch() {
    let f = fixture(4);
    let mut model = tiny_model(0);
    let out = run(&mut model, &f, &TrainConfig { patience: 0, ..Default::default() });
    assert_eq!(out.epochs.len(), 1);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let f = fixture(6);
    let mut model = tiny_model(1);
    let out = run(&mut model, &f, &TrainConfig { max_epochs: 4, ..Default::default() });
    let losses: Vec<f64> = out.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn best_parameters_are_restored() {
    let f = fixture(4);
    let mut model = tiny_model(2);
    let out = run(
        &mut model,
        &f,
        &TrainConfig {
            max_epochs: 6,
            patience: 100,
            optimizer: AdamConfig { lr: 0.05, ..Default::default() },
            ..Default::default()
        },
    );
    let last = out.epochs.last().unwrap().val_mae;
    assert!(out.best_val_mae <= last);
    let min = out.epochs.iter().map(|e| e.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_mae, min);
    assert_eq!(out.epochs[out.best_epoch - 1].val_mae, min);
    let restored = evaluate(&model, &f.split.val, &f.stats, 60).unwrap().agg.mae;
    assert_eq!(restored, min);
}

#[test]
fn training_is_reproducible() {
    let f = fixture(4);
    let config = TrainConfig { max_epochs: 2, ..Default::default() };
    let mut a = tiny_model(3);
    let mut b = tiny_model(3);
    run(&mut a, &f, &config);
    run(&mut b, &f, &config);
    assert_eq!(a, b);
    let bits = |m: &StdgrlModel| -> Vec<u64> { m.params.values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn non_finite_loss_aborts() {
    let f = fixture(4);
    let mut model = tiny_model(4);
    model.params.get_mut("lttl.proj.b").unwrap().data_mut()[0] = f64::NAN;
    let err = train(&mut model, &f.split.train, &f.split.val, &f.stats, &TrainConfig::default(), 60, |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::Divergence { epoch: 1, batch: 0, .. }), "{err}");
}

#[test]
fn window_shape_must_match_model() {
    let f = fixture(4);
    let mut model = StdgrlModel::new(ModelConfig::new(3, 5, 2, tiny_arch(), 0)).unwrap();
    let err = train(&mut model, &f.split.train, &f.split.val, &f.stats, &TrainConfig::default(), 60, |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::InvalidConfig(_)));
}

#[test]
fn evaluate_ignores_window_order() {
    let f = fixture(4);
    let model = tiny_model(5);
    let a = evaluate(&model, &f.split.test, &f.stats, 60).unwrap();
    let mut rev = f.split.test.clone();
    rev.reverse();
    let b = evaluate(&model, &rev, &f.stats, 60).unwrap();
    assert_eq!(a, b);
    assert!(matches!(evaluate(&model, &[], &f.stats, 60), Err(TrainError::EmptyWindows)));
}

#[test]
fn normalization_round_trip_is_neutral() {
    // An oracle predictor's metrics after invert(apply(y)) match those on y.
    let f = fixture(4);
    let y: Vec<&SampleWindow> = f.split.test.iter().collect();
    let truth = Tensor::new(
        [vec![y.len()], y[0].y.shape().to_vec()].concat(),
        y.iter().flat_map(|w| w.y.data().iter().copied()).collect(),
    )
    .unwrap();
    let shifted = Tensor::from_fn(truth.shape(), |i| truth.data()[i] * 1.1 + 3.0);
    let round = f.stats.invert(&f.stats.apply(&shifted));
    let a = compute_metrics(&shifted, &truth, 60).unwrap();
    let b = compute_metrics(&round, &truth, 60).unwrap();
    for (x, y) in a.cells().zip(b.cells()) {
        assert!((x.mae - y.mae).abs() < 1e-9);
        assert!((x.rmse - y.rmse).abs() < 1e-9);
        assert!((x.mape.unwrap() - y.mape.unwrap()).abs() < 1e-9);
    }
}

#[test]
fn stacked_batches_are_normalized() {
    let f = fixture(4);
    let w: Vec<&SampleWindow> = f.split.train[..3].iter().collect();
    let x = stack_inputs(&w, &f.stats).unwrap();
    assert_eq!(x.shape(), &[3, 4, 3, 2]);
    assert_eq!(x.data()[x.len() / 3], f.stats.normalize(w[1].x.data()[0]));
    let y = stack_targets(&w, &f.stats).unwrap();
    assert_eq!(y.shape(), &[3, 2, 3, 2]);
}

#[test]
fn model_gradients_pass_and_faults_are_caught() {
    let model = StdgrlModel::new(ModelConfig::new(3, 3, 2, tiny_arch(), 9)).unwrap();
    let ok = random_gradcheck(&model, 2, 1, 1e-6, None).unwrap();
    assert_eq!(ok.len(), model.params.len());
    for (name, err) in &ok {
        assert!(*err < 1e-4, "{name}: {err}");
    }
    let bad = random_gradcheck(&model, 2, 1, 1e-6, Some("matmul")).unwrap();
    assert!(bad.iter().any(|(_, e)| *e > 1e-4));
}

#[test]
fn adam_covers_every_parameter() {
    let f = fixture(4);
    for arch in [
        tiny_arch(),
        Architecture { use_napl: false, ..tiny_arch() },
        Architecture { use_gru_branch: false, ..tiny_arch() },
        Architecture { use_transformer_branch: false, static_graph: true, ..tiny_arch() },
    ] {
        let mut model = StdgrlModel::new(ModelConfig::new(3, 4, 2, arch, 0)).unwrap();
        let before = model.params.clone();
        run(&mut model, &f, &TrainConfig { max_epochs: 1, ..Default::default() });
        for (name, value) in model.params.iter() {
            assert_ne!(value, before.get(name).unwrap(), "{name} never moved");
        }
    }
}
