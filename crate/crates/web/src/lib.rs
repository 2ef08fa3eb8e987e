//! Browser bindings for a few model pieces: the learned adjacency, attention
//! weights, and a historical-average forecast on synthetic flows.
//!
//! Every export takes and returns flat row-major `f64` buffers. The plain
//! functions hold the logic so they can be tested natively.

use stdgrl_core::autodiff::{Tape, Tensor};
use stdgrl_core::data::synthetic::{generate, SyntheticSpec};
use stdgrl_core::data::CHANNELS;
use stdgrl_core::graph::compute_adaptive_adjacency;
use stdgrl_core::train::HistoricalAverage;
use stdgrl_core::transformer::attention_weights;
use wasm_bindgen::prelude::*;

fn matrix(data: &[f64], rows: usize, cols: usize, what: &str) -> Result<Tensor, String> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(format!("{what}: expected {rows} x {cols} values, got {}", data.len()));
    }
    Tensor::new(vec![rows, cols], data.to_vec()).map_err(|e| e.to_string())
}

/// Row-stochastic `[n × n]` adjacency from `n × d` node embeddings.
pub fn adjacency_of(embeddings: &[f64], n: usize, d: usize) -> Result<Vec<f64>, String> {
    let e = matrix(embeddings, n, d, "embeddings")?;
    compute_adaptive_adjacency(&e).map(Tensor::into_data).map_err(|e| e.to_string())
}

/// `[t × t]` attention weights for queries and keys of width `dk`.
pub fn attention_of(q: &[f64], k: &[f64], t: usize, dk: usize) -> Result<Vec<f64>, String> {
    let tape = Tape::inference();
    let q = tape.leaf(&matrix(q, t, dk, "queries")?);
    let k = tape.leaf(&matrix(k, t, dk, "keys")?);
    attention_weights(q, k).map(|w| w.value()).map_err(|e| e.to_string())
}

/// Flows of one station on the final day of a synthetic series, followed by
/// the historical-average forecast for that day fitted on all earlier days.
/// Returns `2·s` values for `s` slots per day: truth, then forecast.
pub fn ha_forecast_of(days: usize, seed: u64, station: usize, channel: usize) -> Result<Vec<f64>, String> {
    if days < 2 {
        return Err("need at least two days".into());
    }
    let spec = SyntheticSpec {
        days,
        seed,
        ..Default::default()
    };
    let (dataset, _) = generate(&spec).map_err(|e| e.to_string())?;
    if station >= dataset.num_stations() || channel >= CHANNELS {
        return Err(format!(
            "station must be below {} and channel below {CHANNELS}",
            dataset.num_stations()
        ));
    }
    let spd = dataset.slots_per_day();
    let cut = dataset.num_steps() - spd;
    let ha = HistoricalAverage::fit(&dataset, cut).map_err(|e| e.to_string())?;
    let idx = station * CHANNELS + channel;
    let truth = (cut..dataset.num_steps()).map(|t| dataset.flow(t, station, channel));
    let forecast = (cut..dataset.num_steps()).map(|t| ha.predict_row(t)[idx]);
    Ok(truth.chain(forecast).collect())
}

#[wasm_bindgen]
pub fn adjacency(embeddings: Vec<f64>, n: usize, d: usize) -> Result<Vec<f64>, JsError> {
    adjacency_of(&embeddings, n, d).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attention(q: Vec<f64>, k: Vec<f64>, t: usize, dk: usize) -> Result<Vec<f64>, JsError> {
    attention_of(&q, &k, t, dk).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn ha_forecast(days: usize, seed: u32, station: usize, channel: usize) -> Result<Vec<f64>, JsError> {
    ha_forecast_of(days, seed.into(), station, channel).map_err(|e| JsError::new(&e))
}
