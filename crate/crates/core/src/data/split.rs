use serde::{Deserialize, Serialize};

use super::{DataError, FlowDataset, SampleWindow};

/// Row boundary given either as an index or as an ISO-8601 timestamp that is
/// resolved against the dataset start and interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Boundary {
    Index(usize),
    Timestamp(String),
}

impl Boundary {
    fn resolve(&self, dataset: &FlowDataset) -> Result<usize, DataError> {
        match self {
            Boundary::Index(i) => Ok(*i),
            Boundary::Timestamp(ts) => dataset.index_of(ts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSpec {
    /// Windows are divided by count in origin order, then windows at the
    /// start of val/test that overlap the previous partition are dropped.
    Ratio { ratios: [f64; 3] },
    /// Train windows end at or before `val_start`; val windows lie within
    /// `[val_start, test_start)`; test windows start at or after `test_start`.
    /// Windows straddling a boundary are dropped.
    Explicit { val_start: Boundary, test_start: Boundary },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio {
            ratios: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

impl Split {
    /// One past the last row touched by any training window; normalization
    /// statistics are fitted on rows `0..train_end()`.
    pub fn train_end(&self) -> usize {
        self.train.iter().map(SampleWindow::end).max().unwrap_or(0)
    }
}

fn drop_overlap(windows: &mut Vec<SampleWindow>, previous_end: usize) {
    let keep_from = windows
        .iter()
        .position(|w| w.t_origin >= previous_end)
        .unwrap_or(windows.len());
    windows.drain(..keep_from);
}

fn non_empty(split: Split) -> Result<Split, DataError> {
    if split.train.is_empty() {
        return Err(DataError::EmptyPartition("train"));
    }
    if split.val.is_empty() {
        return Err(DataError::EmptyPartition("val"));
    }
    if split.test.is_empty() {
        return Err(DataError::EmptyPartition("test"));
    }
    Ok(split)
}

/// Chronological train/val/test partition of `windows` (sorted by origin).
///
/// Every train window ends before any val window begins, and likewise for
/// val and test, so no target row of an earlier partition is an input of a
/// later one.
pub fn chronological_split(
    windows: Vec<SampleWindow>,
    spec: &SplitSpec,
    dataset: &FlowDataset,
) -> Result<Split, DataError> {
    if windows.windows(2).any(|p| p[0].t_origin >= p[1].t_origin) {
        return Err(DataError::InvalidSplit("windows must be sorted by origin".into()));
    }
    match spec {
        SplitSpec::Ratio { ratios } => {
            if ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
                || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(DataError::InvalidSplit(format!(
                    "ratios must be non-negative and sum to 1, got {ratios:?}"
                )));
            }
            let n = windows.len();
            let count = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
            let n_train = count(ratios[0]).min(n);
            let n_val = count(ratios[1]).min(n - n_train);
            let mut rest = windows;
            let mut val = rest.split_off(n_train);
            let mut test = val.split_off(n_val);
            let train = rest;
            let train_end = train.iter().map(SampleWindow::end).max().unwrap_or(0);
            drop_overlap(&mut val, train_end);
            let val_end = val.iter().map(SampleWindow::end).max().unwrap_or(train_end);
            drop_overlap(&mut test, val_end.max(train_end));
            non_empty(Split { train, val, test })
        }
        SplitSpec::Explicit {
            val_start,
            test_start,
        } => {
            let val_start = val_start.resolve(dataset)?;
            let test_start = test_start.resolve(dataset)?;
            if val_start >= test_start {
                return Err(DataError::InvalidSplit(format!(
                    "val_start ({val_start}) must precede test_start ({test_start})"
                )));
            }
            let mut split = Split {
                train: vec![],
                val: vec![],
                test: vec![],
            };
            for w in windows {
                if w.end() <= val_start {
                    split.train.push(w);
                } else if w.t_origin >= val_start && w.end() <= test_start {
                    split.val.push(w);
                } else if w.t_origin >= test_start {
                    split.test.push(w);
                }
            }
            non_empty(split)
        }
    }
}
