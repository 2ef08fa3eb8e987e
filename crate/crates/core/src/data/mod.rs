//! Metro flow data: file format, normalization, sliding windows and
//! chronological splits.
//!
//! Flow tensors are `[time, station, channel]` with channel 0 = inflow and
//! channel 1 = outflow.

mod flowfile;
mod normalize;
mod split;
pub mod synthetic;
mod window;

pub use flowfile::{load_flow_file, parse_flow_file, render_flow_file, write_flow_file, FlowHeader};
pub use normalize::{zscore_fit, NormalizationStats, STD_FLOOR};
pub use split::{chronological_split, Boundary, Split, SplitSpec};
pub use window::{make_windows, SampleWindow, WindowSpec};

use chrono::{NaiveDate, NaiveDateTime};
use thiserror::Error;

use crate::autodiff::Tensor;

/// Number of flow channels (inflow, outflow).
pub const CHANNELS: usize = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line 1: malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} fields, found {found}")]
    RowLength { line: usize, expected: usize, found: usize },
    #[error("line {line}, field {field}: invalid count {value:?}")]
    InvalidCount { line: usize, field: usize, value: String },
    #[error("line {line}, field {field}: negative count {value}")]
    NegativeCount { line: usize, field: usize, value: i64 },
    #[error("line {line}: time index {found} out of sequence, expected {expected}")]
    NonMonotoneIndex { line: usize, expected: usize, found: String },
    #[error("file truncated: header declares {declared} rows, found {found}")]
    Truncated { declared: usize, found: usize },
    #[error("line {line}: more rows than the {declared} declared in the header")]
    ExtraRows { line: usize, declared: usize },
    #[error("need at least 2 stations, found {0}")]
    TooFewStations(usize),
    #[error("{0}")]
    InvalidDataset(String),
    #[error("cannot build windows: {0}")]
    InfeasibleWindows(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("split leaves the {0} partition without windows")]
    EmptyPartition(&'static str),
    #[error("cannot normalize an empty tensor")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A loaded flow file.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDataset {
    /// `[T_total × N × 2]` non-negative passenger counts.
    pub flows: Tensor,
    pub station_ids: Vec<String>,
    pub interval_minutes: u32,
    /// ISO-8601 timestamp of row 0.
    pub start: String,
}

impl FlowDataset {
    pub fn new(
        flows: Tensor,
        station_ids: Vec<String>,
        interval_minutes: u32,
        start: String,
    ) -> Result<Self, DataError> {
        let shape = flows.shape();
        if shape.len() != 3 || shape[2] != CHANNELS {
            return Err(DataError::InvalidDataset(format!(
                "flow tensor must be [time, station, {CHANNELS}], got {shape:?}"
            )));
        }
        if shape[1] != station_ids.len() {
            return Err(DataError::InvalidDataset(format!(
                "{} station ids for {} stations",
                station_ids.len(),
                shape[1]
            )));
        }
        if station_ids.len() < 2 {
            return Err(DataError::TooFewStations(station_ids.len()));
        }
        if interval_minutes == 0 {
            return Err(DataError::InvalidDataset("interval_minutes must be positive".into()));
        }
        if let Some(bad) = flows.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(DataError::InvalidDataset(format!("invalid count {bad}")));
        }
        if parse_timestamp(&start).is_none() {
            return Err(DataError::InvalidDataset(format!(
                "start is not an ISO-8601 timestamp: {start:?}"
            )));
        }
        Ok(FlowDataset {
            flows,
            station_ids,
            interval_minutes,
            start,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.flows.shape()[0]
    }

    pub fn num_stations(&self) -> usize {
        self.flows.shape()[1]
    }

    pub fn flow(&self, t: usize, station: usize, channel: usize) -> f64 {
        let n = self.num_stations();
        self.flows.data()[(t * n + station) * CHANNELS + channel]
    }

    /// Rows `from..to` as a flat `[to - from, N, 2]` slice.
    pub fn rows(&self, from: usize, to: usize) -> &[f64] {
        let stride = self.num_stations() * CHANNELS;
        &self.flows.data()[from * stride..to * stride]
    }

    /// Number of rows per day at this interval.
    pub fn slots_per_day(&self) -> usize {
        (24 * 60 / self.interval_minutes) as usize
    }

    pub fn start_time(&self) -> NaiveDateTime {
        parse_timestamp(&self.start).expect("validated on construction")
    }

    /// Row index of `timestamp`, counting whole intervals from row 0.
    pub fn index_of(&self, timestamp: &str) -> Result<usize, DataError> {
        let at = parse_timestamp(timestamp).ok_or_else(|| {
            DataError::InvalidSplit(format!("not an ISO-8601 timestamp: {timestamp:?}"))
        })?;
        let minutes = (at - self.start_time()).num_minutes();
        if minutes < 0 {
            return Err(DataError::InvalidSplit(format!(
                "{timestamp} precedes the dataset start {}",
                self.start
            )));
        }
        Ok((minutes as u64).div_ceil(self.interval_minutes as u64) as usize)
    }
}

/// Accepts RFC 3339, `YYYY-MM-DDTHH:MM[:SS]` and bare dates.
pub(crate) fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}
