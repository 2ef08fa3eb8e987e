//! Optimization, loss, metrics and the Historical Average baseline.

mod adam;
mod baseline;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use baseline::{evaluate_ha, historical_average, HistoricalAverage};
pub use metrics::{
    compute_metrics, evaluate, loss_mae, loss_mae_masked, normalized_mae, predict_windows, MetricAccumulator, Metrics,
    MetricsReport, REPORTED_HORIZONS,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{check_gradients, Tape, Tensor, TensorError};
use crate::data::{DataError, NormalizationStats, SampleWindow, CHANNELS};
use crate::model::{ModelError, ParamStore, StdgrlModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no gradient reached parameter {0}")]
    MissingGradient(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("no windows to evaluate")]
    EmptyWindows,
    #[error("mask selects no entries")]
    AllZeroMask,
    #[error("prediction shape {pred:?} does not match target shape {truth:?}")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("time-of-day slot {0} never occurs in the training data")]
    UnobservedSlot(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("batch_size and max_epochs must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean normalized MAE over the epoch's batches.
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// Parameters after the last epoch run, before restoring the best.
    pub last_params: ParamStore,
}

fn stack_with(windows: &[&SampleWindow], stats: &NormalizationStats, pick: fn(&SampleWindow) -> &Tensor) -> Result<Tensor, TrainError> {
    let first = pick(windows.first().ok_or(TrainError::EmptyWindows)?);
    let mut shape = vec![windows.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(windows.len() * first.len());
    for w in windows {
        let t = pick(w);
        if t.shape() != first.shape() {
            return Err(TrainError::ShapeMismatch {
                pred: first.shape().to_vec(),
                truth: t.shape().to_vec(),
            });
        }
        data.extend(t.data().iter().map(|&v| stats.normalize(v)));
    }
    Ok(Tensor::new(shape, data)?)
}

/// Normalized inputs `[B × T × N × 2]`.
pub fn stack_inputs(windows: &[&SampleWindow], stats: &NormalizationStats) -> Result<Tensor, TrainError> {
    stack_with(windows, stats, |w| &w.x)
}

/// Normalized targets `[B × m × N × 2]`.
pub fn stack_targets(windows: &[&SampleWindow], stats: &NormalizationStats) -> Result<Tensor, TrainError> {
    stack_with(windows, stats, |w| &w.y)
}

fn check_windows(model: &StdgrlModel, windows: &[SampleWindow], which: &str) -> Result<(), TrainError> {
    let c = &model.config;
    let want_x = [c.input_len, c.num_nodes, CHANNELS];
    let want_y = [c.output_len, c.num_nodes, CHANNELS];
    match windows.iter().find(|w| w.x.shape() != want_x || w.y.shape() != want_y) {
        Some(w) => Err(TrainError::InvalidConfig(format!(
            "{which} window at row {} has shapes {:?}/{:?}, model expects {want_x:?}/{want_y:?}",
            w.t_origin,
            w.x.shape(),
            w.y.shape()
        ))),
        None => Ok(()),
    }
}

/// Mini-batch Adam on normalized MAE. After every epoch the validation
/// metrics are computed on the original scale; the parameters with the
/// lowest validation MAE are restored into `model` at the end. `on_epoch`
/// sees each log line as it is produced.
pub fn train(
    model: &mut StdgrlModel,
    train_windows: &[SampleWindow],
    val_windows: &[SampleWindow],
    stats: &NormalizationStats,
    config: &TrainConfig,
    interval_minutes: u32,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(TrainError::EmptyWindows);
    }
    check_windows(model, train_windows, "train")?;
    check_windows(model, val_windows, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let mut state = AdamState::new(&model.params, config.optimizer);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut epochs = Vec::new();
    let mut best = (0usize, f64::INFINITY, model.params.clone());
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SampleWindow> = idx.iter().map(|&i| &train_windows[i]).collect();
            let x = stack_inputs(&batch, stats)?;
            let y = stack_targets(&batch, stats)?;
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let pred = model.forward_batch(&bound, tape.constant(x))?;
            let loss = loss_mae(pred, &y)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b, loss: value });
            }
            tape.backward(loss)?;
            let grads = bound.grads();
            drop(bound);
            adam_step(&mut model.params, &grads, &mut state)?;
            loss_sum += value * idx.len() as f64;
        }
        let train_loss = loss_sum / train_windows.len() as f64;
        let val = evaluate(model, val_windows, stats, interval_minutes)?.agg;
        if !val.mae.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
                loss: val.mae,
            });
        }
        let log = EpochLog {
            epoch,
            train_loss,
            val_mae: val.mae,
            val_rmse: val.rmse,
            val_mape: val.mape,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        epochs.push(log);
        if val.mae < best.1 {
            best = (epoch, val.mae, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }

    let last_params = std::mem::replace(&mut model.params, best.2);
    Ok(TrainOutcome {
        epochs,
        best_epoch: best.0,
        best_val_mae: best.1,
        last_params,
    })
}

/// Finite-difference check of the normalized MAE loss of `model` on one
/// batch against every registered parameter. Returns the max relative error
/// per parameter, in registry order. `fault` names an op whose backward rule
/// is deliberately corrupted, to show the check catches it.
pub fn check_model_gradients(
    model: &StdgrlModel,
    x: &Tensor,
    y: &Tensor,
    h: f64,
    fault: Option<&'static str>,
) -> Result<Vec<(String, f64)>, TrainError> {
    let report = check_gradients(
        model.params.values(),
        |tape, vars| {
            if let Some(op) = fault {
                tape.inject_fault(op);
            }
            let bound = model.params.bind_vars(vars.to_vec());
            let pred = model.forward_batch(&bound, tape.constant(x.clone())).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::Precondition(other.to_string()),
            })?;
            Ok(pred.sub(tape.constant(y.clone()))?.abs().mean())
        },
        h,
    )?;
    Ok(model
        .params
        .names()
        .iter()
        .cloned()
        .zip(report.max_relative_error)
        .collect())
}

/// [`check_model_gradients`] on a seeded random batch of `batch` windows with
/// inputs and targets drawn from U(-1, 1).
pub fn random_gradcheck(
    model: &StdgrlModel,
    batch: usize,
    seed: u64,
    h: f64,
    fault: Option<&'static str>,
) -> Result<Vec<(String, f64)>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &model.config;
    let x = Tensor::from_fn(&[batch, c.input_len, c.num_nodes, CHANNELS], |_| rng.gen_range(-1.0..1.0));
    let y = Tensor::from_fn(&[batch, c.output_len, c.num_nodes, CHANNELS], |_| rng.gen_range(-1.0..1.0));
    check_model_gradients(model, &x, &y, h, fault)
}

#[cfg(test)]
mod tests;
