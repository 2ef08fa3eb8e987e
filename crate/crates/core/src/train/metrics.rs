use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use super::{stack_inputs, TrainError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{NormalizationStats, SampleWindow};
use crate::model::StdgrlModel;

/// Horizon steps reported as their own columns.
pub const REPORTED_HORIZONS: usize = 4;

/// Windows per inference batch in [`evaluate`].
const EVAL_BATCH: usize = 64;

/// Running sums for MAE, RMSE and MAPE. MAPE skips entries whose truth is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    count: usize,
    ape: f64,
    ape_count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, truth: f64) {
        let err = pred - truth;
        self.abs += err.abs();
        self.sq += err * err;
        self.count += 1;
        if truth != 0.0 {
            self.ape += (err / truth).abs();
            self.ape_count += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.ape_count > 0).then(|| self.ape / self.ape_count as f64),
        }
    }
}

/// MAPE is a fraction (1.0 is 100%) and `None` when every truth is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

/// Per-horizon columns followed by the aggregate over every output step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<(String, Metrics)>,
    pub agg: Metrics,
}

impl MetricsReport {
    pub fn get(&self, key: &str) -> Option<&Metrics> {
        if key == "agg" {
            return Some(&self.agg);
        }
        self.horizons.iter().find(|(k, _)| k == key).map(|(_, m)| m)
    }

    pub fn cells(&self) -> impl Iterator<Item = &Metrics> {
        self.horizons.iter().map(|(_, m)| m).chain(std::iter::once(&self.agg))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.horizons.len() + 1))?;
        for (k, m) in &self.horizons {
            map.serialize_entry(k, m)?;
        }
        map.serialize_entry("agg", &self.agg)?;
        map.end()
    }
}

pub(crate) fn horizon_key(step: usize, interval_minutes: u32) -> String {
    format!("{}min", step as u64 * interval_minutes as u64)
}

/// Metrics over predictions and truths shaped `[… × m × N × C]`; the third
/// axis from the end is the horizon.
pub fn compute_metrics(pred: &Tensor, truth: &Tensor, interval_minutes: u32) -> Result<MetricsReport, TrainError> {
    if pred.shape() != truth.shape() {
        return Err(TrainError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    let shape = pred.shape();
    if shape.len() < 3 || pred.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "metrics need a non-empty [.. × m × N × C] tensor, got {shape:?}"
        )));
    }
    let m = shape[shape.len() - 3];
    let inner: usize = shape[shape.len() - 2..].iter().product();
    let mut per_step = vec![MetricAccumulator::default(); m];
    let mut agg = MetricAccumulator::default();
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        per_step[(i / inner) % m].push(p, t);
        agg.push(p, t);
    }
    Ok(MetricsReport {
        horizons: per_step
            .iter()
            .take(REPORTED_HORIZONS)
            .enumerate()
            .map(|(k, acc)| (horizon_key(k + 1, interval_minutes), acc.finish()))
            .collect(),
        agg: agg.finish(),
    })
}

/// `Σ mask·|pred − target| / Σ mask`.
pub fn loss_mae_masked<'t>(pred: Var<'t>, target: &Tensor, mask: &Tensor) -> Result<Var<'t>, TrainError> {
    let total: f64 = mask.data().iter().sum();
    if total == 0.0 {
        return Err(TrainError::AllZeroMask);
    }
    let tape = pred.tape();
    let err = pred.sub(tape.constant(target.clone()))?.abs();
    Ok(err.mul(tape.constant(mask.clone()))?.sum().scale(1.0 / total))
}

/// Plain MAE loss: every entry counts.
pub fn loss_mae<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>, TrainError> {
    let tape = pred.tape();
    Ok(pred.sub(tape.constant(target.clone()))?.abs().mean())
}

/// Predictions on the original scale, one `[m × N × 2]` tensor per window,
/// in the order given.
pub fn predict_windows(
    model: &StdgrlModel,
    windows: &[SampleWindow],
    stats: &NormalizationStats,
) -> Result<Vec<Tensor>, TrainError> {
    let mut out = Vec::with_capacity(windows.len());
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let x = stack_inputs(chunk, stats)?;
        let tape = Tape::inference();
        let bound = model.params.bind(&tape);
        let y = model.forward_batch(&bound, tape.constant(x))?.to_tensor();
        let y = stats.invert(&y);
        let per = y.len() / chunk.len();
        let shape = y.shape()[1..].to_vec();
        for b in 0..chunk.len() {
            out.push(Tensor::new(shape.clone(), y.data()[b * per..(b + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

fn sorted(windows: &[SampleWindow]) -> Vec<SampleWindow> {
    let mut w = windows.to_vec();
    w.sort_by_key(|w| w.t_origin);
    w
}

fn stack(tensors: &[Tensor]) -> Result<Tensor, TrainError> {
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(tensors[0].shape());
    let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Metrics of `model` on `windows`, original scale. Windows are sorted by
/// origin first, so the report does not depend on their order.
pub fn evaluate(
    model: &StdgrlModel,
    windows: &[SampleWindow],
    stats: &NormalizationStats,
    interval_minutes: u32,
) -> Result<MetricsReport, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyWindows);
    }
    let windows = sorted(windows);
    let preds = predict_windows(model, &windows, stats)?;
    let truth: Vec<Tensor> = windows.iter().map(|w| w.y.clone()).collect();
    compute_metrics(&stack(&preds)?, &stack(&truth)?, interval_minutes)
}

/// Aggregate MAE on the normalized scale.
pub fn normalized_mae(
    model: &StdgrlModel,
    windows: &[SampleWindow],
    stats: &NormalizationStats,
) -> Result<f64, TrainError> {
    Ok(evaluate(model, windows, stats, 1)?.agg.mae / stats.std)
}
