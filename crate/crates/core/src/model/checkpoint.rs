//! Binary checkpoint:
//!
//! ```text
//! b"STDGRLCK"  u32 version
//! u64 config_len  config JSON
//! u32 block_count
//! per block: u32 name_len, name, u32 rank, u64 × rank dims, f64 × numel data
//! ```
//!
//! All integers and floats are little-endian. Blocks appear in registry
//! order; loading rebuilds the registry from the config and requires every
//! block to match it by name and shape.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelError, StdgrlModel};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 8] = b"STDGRLCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(model: &StdgrlModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, value) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &StdgrlModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StdgrlModel, ModelError> {
    read_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<StdgrlModel, ModelError> {
    let header = |msg: &str| ModelError::Checkpoint(msg.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(header("not a checkpoint file (bad magic)"));
    }
    match r.u32() {
        Some(VERSION) => {}
        Some(v) => return Err(ModelError::Checkpoint(format!("unsupported version {v}"))),
        None => return Err(header("truncated header")),
    }
    let config_len = r.u64().ok_or_else(|| header("truncated header"))? as usize;
    let config_bytes = r.take(config_len).ok_or_else(|| header("truncated config"))?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let mut model = StdgrlModel::new(config)?;

    let count = r.u32().ok_or_else(|| header("truncated block count"))? as usize;
    let expected: Vec<String> = model.params.names().to_vec();
    if count != expected.len() {
        return Err(ModelError::Checkpoint(format!(
            "{count} parameter blocks, config registers {}",
            expected.len()
        )));
    }
    for want in &expected {
        let block = |reason: &str| ModelError::CheckpointBlock {
            name: want.clone(),
            reason: reason.to_string(),
        };
        let name_len = r.u32().ok_or_else(|| block("truncated"))? as usize;
        let name = r.take(name_len).ok_or_else(|| block("truncated"))?;
        let name = std::str::from_utf8(name).map_err(|_| block("name is not UTF-8"))?;
        if name != want {
            return Err(ModelError::CheckpointBlock {
                name: name.to_string(),
                reason: format!("expected parameter {want} at this position"),
            });
        }
        let rank = r.u32().ok_or_else(|| block("truncated"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(|| block("truncated"))? as usize);
        }
        let target = model.params.get_mut(want).expect("registered");
        if shape != target.shape() {
            return Err(block(&format!(
                "shape {shape:?} does not match registered {:?}",
                target.shape()
            )));
        }
        let raw = r.take(target.len() * 8).ok_or_else(|| block("truncated data"))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(block(&format!("non-finite value {bad}")));
        }
        *target = Tensor::new(shape, values)?.with_grad();
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after the last block",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}
