//! Historical Average: each (time-of-day slot, station, channel) is predicted
//! by its mean over the training days.

use chrono::Timelike;

use super::metrics::{horizon_key, MetricAccumulator, MetricsReport, REPORTED_HORIZONS};
use super::TrainError;
use crate::autodiff::Tensor;
use crate::data::{FlowDataset, SampleWindow};

#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    /// `[slots_per_day × N × C]`
    pub means: Tensor,
    /// Slot of dataset row 0.
    pub first_slot: usize,
}

/// Fits per-slot means on `train_flows [rows × N × C]`, whose row 0 falls in
/// time-of-day slot `first_slot`.
pub fn historical_average(
    train_flows: &Tensor,
    first_slot: usize,
    slots_per_day: usize,
) -> Result<HistoricalAverage, TrainError> {
    let shape = train_flows.shape();
    if shape.len() != 3 || slots_per_day == 0 {
        return Err(TrainError::InvalidConfig(format!(
            "historical average needs [rows × N × C] flows and a positive day length, got {shape:?} and {slots_per_day}"
        )));
    }
    let rows = shape[0];
    let width = shape[1] * shape[2];
    let mut sums = vec![0.0; slots_per_day * width];
    let mut counts = vec![0usize; slots_per_day];
    for t in 0..rows {
        let slot = (first_slot + t) % slots_per_day;
        counts[slot] += 1;
        let row = &train_flows.data()[t * width..(t + 1) * width];
        for (s, v) in sums[slot * width..(slot + 1) * width].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(slot) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::UnobservedSlot(slot));
    }
    for (slot, &c) in counts.iter().enumerate() {
        for s in &mut sums[slot * width..(slot + 1) * width] {
            *s /= c as f64;
        }
    }
    Ok(HistoricalAverage {
        means: Tensor::new(vec![slots_per_day, shape[1], shape[2]], sums)?,
        first_slot,
    })
}

impl HistoricalAverage {
    /// Fits on the first `train_end` rows of `dataset`.
    pub fn fit(dataset: &FlowDataset, train_end: usize) -> Result<Self, TrainError> {
        let spd = dataset.slots_per_day();
        let start = dataset.start_time();
        let minutes = start.hour() as usize * 60 + start.minute() as usize;
        let first_slot = minutes / dataset.interval_minutes as usize;
        let width = dataset.num_stations() * crate::data::CHANNELS;
        let train = Tensor::new(
            vec![train_end, dataset.num_stations(), crate::data::CHANNELS],
            dataset.flows.data()[..train_end * width].to_vec(),
        )?;
        historical_average(&train, first_slot, spd)
    }

    pub fn slots_per_day(&self) -> usize {
        self.means.shape()[0]
    }

    fn width(&self) -> usize {
        self.means.shape()[1] * self.means.shape()[2]
    }

    /// Prediction `[N × C]` for dataset row `t`.
    pub fn predict_row(&self, t: usize) -> &[f64] {
        let slot = (self.first_slot + t) % self.slots_per_day();
        let w = self.width();
        &self.means.data()[slot * w..(slot + 1) * w]
    }

    /// `[m × N × C]` prediction for a window's target rows.
    pub fn predict_window(&self, window: &SampleWindow) -> Tensor {
        let m = window.output_len();
        let data = (0..m)
            .flat_map(|k| self.predict_row(window.target_start() + k).iter().copied())
            .collect();
        let mut shape = vec![m];
        shape.extend_from_slice(&self.means.shape()[1..]);
        Tensor::new(shape, data).expect("sized from the means table")
    }
}

/// HA metrics over the distinct target rows of `windows`. A row's HA value
/// does not depend on which window or horizon asks for it, so every horizon
/// column equals the aggregate.
pub fn evaluate_ha(
    ha: &HistoricalAverage,
    dataset: &FlowDataset,
    windows: &[SampleWindow],
    interval_minutes: u32,
) -> Result<MetricsReport, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyWindows);
    }
    let mut rows: Vec<usize> = windows
        .iter()
        .flat_map(|w| w.target_start()..w.end())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    let mut acc = MetricAccumulator::default();
    for &t in &rows {
        for (&p, &y) in ha.predict_row(t).iter().zip(dataset.rows(t, t + 1)) {
            acc.push(p, y);
        }
    }
    let m = windows[0].output_len();
    let metrics = acc.finish();
    Ok(MetricsReport {
        horizons: (1..=m.min(REPORTED_HORIZONS))
            .map(|k| (horizon_key(k, interval_minutes), metrics))
            .collect(),
        agg: metrics,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{make_windows, WindowSpec};

    fn dataset(days: usize, spd_minutes: u32, f: impl Fn(usize) -> f64) -> FlowDataset {
        let rows = days * (24 * 60 / spd_minutes as usize);
        let flows = Tensor::from_fn(&[rows, 2, 2], f);
        FlowDataset::new(flows, vec!["A".into(), "B".into()], spd_minutes, "2024-01-01T00:00:00".into()).unwrap()
    }

    #[test]
    fn two_day_mean() {
        // 4 slots per day, one station, one channel; slot 1 reads 10 then 20.
        let flows = Tensor::new(vec![8, 1, 1], vec![0.0, 10.0, 0.0, 0.0, 0.0, 20.0, 0.0, 0.0]).unwrap();
        let ha = historical_average(&flows, 0, 4).unwrap();
        assert_eq!(ha.predict_row(1), &[15.0]);
        assert_eq!(ha.predict_row(9), &[15.0]);
    }

    #[test]
    fn single_day_is_reproduced() {
        let flows = Tensor::from_fn(&[4, 2, 2], |i| (i * 7 % 5) as f64);
        let ha = historical_average(&flows, 0, 4).unwrap();
        assert_eq!(ha.means.data(), flows.data());
    }

    #[test]
    fn offset_start_slot() {
        let flows = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ha = historical_average(&flows, 2, 4).unwrap();
        assert_eq!(ha.means.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(ha.predict_row(0), &[1.0]);
    }

    #[test]
    fn short_history_leaves_a_slot_unobserved() {
        let flows = Tensor::zeros(&[3, 1, 1]);
        assert!(matches!(historical_average(&flows, 0, 4), Err(TrainError::UnobservedSlot(3))));
    }

    #[test]
    fn fit_reads_the_start_time() {
        let flows = Tensor::from_fn(&[96, 2, 2], |i| (i / 4) as f64);
        let ds = FlowDataset::new(flows, vec!["A".into(), "B".into()], 15, "2024-01-01T06:00:00".into()).unwrap();
        let ha = HistoricalAverage::fit(&ds, 96).unwrap();
        assert_eq!(ha.first_slot, 24);
        assert_eq!(ha.predict_row(5), ds.rows(5, 6));
    }

    #[test]
    fn horizon_columns_are_identical() {
        let ds = dataset(3, 60, |i| ((i * 37) % 11) as f64);
        let ha = HistoricalAverage::fit(&ds, 48).unwrap();
        let windows = make_windows(&ds, WindowSpec { input_len: 3, output_len: 6, stride: 1 }).unwrap();
        let r = evaluate_ha(&ha, &ds, &windows[40..], 60).unwrap();
        assert_eq!(r.horizons.len(), 4);
        for (_, m) in &r.horizons {
            assert_eq!(*m, r.agg);
        }
        assert_eq!(r.horizons[3].0, "240min");
    }

    #[test]
    fn window_prediction_tracks_rows() {
        let ds = dataset(2, 60, |i| i as f64);
        let ha = HistoricalAverage::fit(&ds, 48).unwrap();
        let w = &make_windows(&ds, WindowSpec { input_len: 2, output_len: 3, stride: 1 }).unwrap()[30];
        let p = ha.predict_window(w);
        assert_eq!(p.shape(), &[3, 2, 2]);
        for k in 0..3 {
            assert_eq!(&p.data()[k * 4..(k + 1) * 4], ha.predict_row(w.target_start() + k));
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force_mean(
            spd in 1usize..6,
            rows_extra in 0usize..15,
            first in 0usize..6,
            seed in any::<u64>(),
        ) {
            let first = first % spd;
            let rows = spd + rows_extra;
            let flows = Tensor::from_fn(&[rows, 2, 2], |i| ((seed ^ (i as u64).wrapping_mul(0x9e37)) % 1000) as f64 * 0.37);
            let ha = historical_average(&flows, first, spd).unwrap();
            for slot in 0..spd {
                for j in 0..4 {
                    let vals: Vec<f64> = (0..rows)
                        .filter(|t| (first + t) % spd == slot)
                        .map(|t| flows.data()[t * 4 + j])
                        .collect();
                    let mut sum = 0.0;
                    for v in &vals {
                        sum += v;
                    }
                    let want = sum / vals.len() as f64;
                    prop_assert_eq!(ha.means.data()[slot * 4 + j].to_bits(), want.to_bits());
                }
            }
        }
    }
}
