//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"ODLABCK\0"
//! 8       4     header length H, u32 little-endian
//! 12      H     UTF-8 JSON header (see `CheckpointHeader`)
//! 12+H    4*N   parameter values, f32 little-endian, in declaration order
//! ```
//!
//! The header lists every tensor's name and shape in the same order as the
//! value block, so the file can be read without this crate.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ODLABCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// "student" or "ema".
    pub tag: String,
    pub config: ModelConfig,
    pub num_stages: usize,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (e.g. the resolved training config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode(params: &ModelParams, tag: &str, seed: u64, epoch: Option<usize>, extra: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        tag: tag.to_string(),
        config: params.config().clone(),
        num_stages: params.config().num_stages,
        seed,
        epoch,
        tensors: params
            .specs()
            .iter()
            .map(|s| TensorEntry { name: s.name.clone(), shape: [s.rows, s.cols] })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in params.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ModelParams)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let mut params = ModelParams::zeros(&header.config);
    let listed: Vec<(String, usize, usize)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape[0], t.shape[1])).collect();
    let expected: Vec<(String, usize, usize)> = params.specs().iter().map(|s| (s.name.clone(), s.rows, s.cols)).collect();
    if listed != expected {
        return Err(Error::LayoutMismatch("checkpoint tensor list does not match its config".into()));
    }
    let data = &bytes[12 + hlen..];
    if data.len() != 4 * params.len() {
        return Err(bad(&format!("expected {} value bytes, found {}", 4 * params.len(), data.len())));
    }
    for (v, chunk) in params.values_mut().iter_mut().zip(data.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    Ok((header, params))
}

pub fn save(path: &Path, params: &ModelParams, tag: &str, seed: u64, epoch: Option<usize>, extra: serde_json::Value) -> Result<()> {
    let bytes = encode(params, tag, seed, epoch, extra)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    decode(&fs::read(path)?)
}
