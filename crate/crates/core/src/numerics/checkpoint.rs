//! Checkpoint file layout:
//!
//! ```text
//! b"CEDCKPT1"                  8-byte magic
//! u64 little-endian            header length in bytes
//! header                       UTF-8 JSON (`CheckpointHeader`)
//! f64 little-endian * n        parameter data, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use crate::error::{CedError, Result};

const MAGIC: &[u8; 8] = b"CEDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    /// Free-form model metadata (configuration, fitted vocabularies).
    pub extra: serde_json::Value,
}

pub fn encode_checkpoint(
    config_hash: &str,
    step: u64,
    extra: serde_json::Value,
    params: &ParamStore,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        step,
        params: params
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in params.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore)> {
    let bad = |m: &str| CedError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut offset = 16 + hlen;
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((header, store))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config_hash: &str,
    step: u64,
    extra: serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(config_hash, step, extra, params)?;
    fs::write(path, bytes).map_err(|e| CedError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CedError::io(path, e))?;
    decode_checkpoint(&bytes)
}
