//! Text flow format.
//!
//! ```text
//! {"stations": ["A", "B"], "interval_minutes": 15, "start": "2019-03-01T06:30:00", "rows": 2}
//! 0,12,4,7,9
//! 1,15,3,8,11
//! ```
//!
//! Line 1 is a JSON header. Every following line is
//! `t_index, in_1, …, in_N, out_1, …, out_N` where `t_index` is the 0-based row
//! ordinal and counts are non-negative integers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_timestamp, DataError, FlowDataset, CHANNELS};
use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowHeader {
    pub stations: Vec<String>,
    pub interval_minutes: u32,
    pub start: String,
    pub rows: usize,
}

pub fn load_flow_file(path: impl AsRef<Path>) -> Result<FlowDataset, DataError> {
    let text = fs::read_to_string(path)?;
    parse_flow_file(&text)
}

pub fn parse_flow_file(text: &str) -> Result<FlowDataset, DataError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| DataError::MalformedHeader("file is empty".into()))?;
    let header: FlowHeader =
        serde_json::from_str(header_line).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    let n = header.stations.len();
    if n < 2 {
        return Err(DataError::TooFewStations(n));
    }
    if header.interval_minutes == 0 {
        return Err(DataError::MalformedHeader("interval_minutes must be positive".into()));
    }
    if parse_timestamp(&header.start).is_none() {
        return Err(DataError::MalformedHeader(format!(
            "start is not an ISO-8601 timestamp: {:?}",
            header.start
        )));
    }
    if header.rows == 0 {
        return Err(DataError::MalformedHeader("rows must be positive".into()));
    }

    let expected_fields = 1 + CHANNELS * n;
    let mut flows = vec![0.0; header.rows * n * CHANNELS];
    let mut found = 0usize;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if found == header.rows {
            return Err(DataError::ExtraRows {
                line: line_no,
                declared: header.rows,
            });
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected_fields {
            return Err(DataError::RowLength {
                line: line_no,
                expected: expected_fields,
                found: fields.len(),
            });
        }
        if fields[0].parse::<usize>().ok() != Some(found) {
            return Err(DataError::NonMonotoneIndex {
                line: line_no,
                expected: found,
                found: fields[0].to_string(),
            });
        }
        let row = &mut flows[found * n * CHANNELS..(found + 1) * n * CHANNELS];
        for (k, raw) in fields[1..].iter().enumerate() {
            let field = k + 2;
            let value: i64 = raw.parse().map_err(|_| DataError::InvalidCount {
                line: line_no,
                field,
                value: raw.to_string(),
            })?;
            if value < 0 {
                return Err(DataError::NegativeCount {
                    line: line_no,
                    field,
                    value,
                });
            }
            // file order is all inflows then all outflows
            let (channel, station) = (k / n, k % n);
            row[station * CHANNELS + channel] = value as f64;
        }
        found += 1;
    }
    if found != header.rows {
        return Err(DataError::Truncated {
            declared: header.rows,
            found,
        });
    }
    let flows = Tensor::new(vec![header.rows, n, CHANNELS], flows).expect("sized from header");
    FlowDataset::new(flows, header.stations, header.interval_minutes, header.start)
}

/// Serializes a dataset. Counts are rounded to the nearest integer.
pub fn render_flow_file(dataset: &FlowDataset) -> String {
    let header = FlowHeader {
        stations: dataset.station_ids.clone(),
        interval_minutes: dataset.interval_minutes,
        start: dataset.start.clone(),
        rows: dataset.num_steps(),
    };
    let n = dataset.num_stations();
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for t in 0..dataset.num_steps() {
        write!(out, "{t}").unwrap();
        for channel in 0..CHANNELS {
            for station in 0..n {
                write!(out, ",{}", dataset.flow(t, station, channel).round() as i64).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_flow_file(dataset: &FlowDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, render_flow_file(dataset))?;
    Ok(())
}
