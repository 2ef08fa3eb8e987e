//! Seeded synthetic metro flows for tests and demos.
//!
//! Each station has a base level, a daily sinusoid with its own amplitude and
//! phase (outflow lags inflow), a linear trend in days, and Gaussian noise
//! whose standard deviation is a fraction of the sinusoid's own standard
//! deviation at the current level. Counts are clamped at zero and rounded.

use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, FlowDataset, CHANNELS};
use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub stations: usize,
    pub days: usize,
    pub interval_minutes: u32,
    pub seed: u64,
    pub start: String,
    /// Noise standard deviation as a fraction of the daily sinusoid's
    /// standard deviation (`level · amplitude / √2`).
    pub noise: f64,
    /// Largest per-station trend, as a fraction of the base level per day.
    /// Each station draws a slope of magnitude in `[max_trend/3, max_trend]`
    /// with a random sign.
    pub max_trend: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            stations: 8,
            days: 20,
            interval_minutes: 15,
            seed: 0,
            start: "2024-01-01T00:00:00".into(),
            noise: 0.05,
            max_trend: 0.03,
        }
    }
}

/// Per-station generating parameters, exposed so tests can reason about the
/// clean signal.
#[derive(Debug, Clone, PartialEq)]
pub struct StationProfile {
    pub base: f64,
    pub amplitude: f64,
    /// Phase of the inflow sinusoid; the outflow phase is this plus `lag`.
    pub phase: f64,
    pub lag: f64,
    /// Fractional change of the level per day.
    pub slope: f64,
}

impl StationProfile {
    pub fn level(&self, day: f64) -> f64 {
        self.base * (1.0 + self.slope * day)
    }

    /// Noise-free value at fractional `day` (time of day in the fraction).
    pub fn clean(&self, day: f64, channel: usize) -> f64 {
        let phase = self.phase + if channel == 1 { self.lag } else { 0.0 };
        self.level(day) * (1.0 + self.amplitude * (2.0 * PI * day + phase).sin())
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<(FlowDataset, Vec<StationProfile>), DataError> {
    if spec.interval_minutes == 0 || 1440 % spec.interval_minutes != 0 {
        return Err(DataError::InvalidDataset(format!(
            "interval {} does not divide a day",
            spec.interval_minutes
        )));
    }
    if spec.days == 0 {
        return Err(DataError::InvalidDataset("days must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.max_trend >= 0.0) {
        return Err(DataError::InvalidDataset("noise and max_trend must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let profiles: Vec<StationProfile> = (0..spec.stations)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            StationProfile {
                base: rng.gen_range(100.0..1000.0),
                amplitude: rng.gen_range(0.3..0.8),
                phase: rng.gen_range(0.0..2.0 * PI),
                lag: rng.gen_range(PI / 4.0..3.0 * PI / 4.0),
                slope: sign * spec.max_trend * rng.gen_range(1.0 / 3.0..=1.0),
            }
        })
        .collect();

    let slots = (1440 / spec.interval_minutes) as usize;
    let rows = spec.days * slots;
    let n = spec.stations;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut flows = Vec::with_capacity(rows * n * CHANNELS);
    for t in 0..rows {
        let day = t as f64 / slots as f64;
        for p in &profiles {
            for channel in 0..CHANNELS {
                let sigma = spec.noise * p.level(day) * p.amplitude / SQRT_2;
                let v = p.clean(day, channel) + sigma * unit.sample(&mut rng);
                flows.push(v.max(0.0).round());
            }
        }
    }
    let flows = Tensor::new(vec![rows, n, CHANNELS], flows).map_err(|e| DataError::InvalidDataset(e.to_string()))?;
    let ids = (0..n).map(|i| format!("S{:02}", i + 1)).collect();
    let dataset = FlowDataset::new(flows, ids, spec.interval_minutes, spec.start.clone())?;
    Ok((dataset, profiles))
}
