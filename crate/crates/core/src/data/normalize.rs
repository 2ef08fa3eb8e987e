use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autodiff::Tensor;

/// Lower bound on the fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Global z-score statistics over every entry (all stations, both channels)
/// of the training portion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation of `values`, std floored at
/// [`STD_FLOOR`].
pub fn zscore_fit(values: &[f64]) -> Result<NormalizationStats, DataError> {
    if values.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(NormalizationStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

impl NormalizationStats {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.shape(), |i| self.normalize(x.data()[i]))
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.shape(), |i| self.denormalize(x.data()[i]))
    }
}
