//! BPOL/1 policy checkpoints.
//!
//! ```text
//! magic   8 bytes   "BPOL\0\x01\0\0"
//! hlen    u32 LE    length of the JSON header in bytes
//! header  hlen      {"shape":{..},"action_scale":..,"binary_scale":..,"layers":[..],"param_count":..,"cfg_hash":".."}
//! payload 4*count   parameters as f32 LE, tensors in header order
//! crc     u32 LE    CRC32 (IEEE) of the payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{NetShape, PolicyParams};

pub const BPOL_MAGIC: [u8; 8] = *b"BPOL\x00\x01\x00\x00";
const MAX_HEADER_LEN: usize = 1 << 16;
/// Refuse to allocate for absurd parameter counts from untrusted headers.
const MAX_PARAMS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a BPOL/1 file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes after the header, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("non-finite weight at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub shape: NetShape,
    pub action_scale: f64,
    pub binary_scale: f64,
    pub layers: Vec<LayerInfo>,
    pub param_count: usize,
    /// Hash of the training configuration that produced the weights.
    pub cfg_hash: String,
}

fn layers_of(shape: &NetShape) -> Vec<LayerInfo> {
    shape
        .layout()
        .tensors(shape)
        .into_iter()
        .map(|(name, shape, _)| LayerInfo {
            name: name.into(),
            shape,
        })
        .collect()
}

pub fn encode_checkpoint(params: &PolicyParams, cfg_hash: &str) -> Vec<u8> {
    let header = CheckpointHeader {
        shape: params.shape,
        action_scale: params.action_scale,
        binary_scale: params.binary_scale,
        layers: layers_of(&params.shape),
        param_count: params.len(),
        cfg_hash: cfg_hash.to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::with_capacity(4 * params.len());
    for w in &params.data {
        payload.extend_from_slice(&(*w as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(&BPOL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// Parses a checkpoint from untrusted bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PolicyParams, CheckpointHeader), CheckpointError> {
    if bytes.len() < 8 || bytes[..8] != BPOL_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[8..];
    if rest.len() < 4 {
        return Err(CheckpointError::MalformedHeader("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if hlen > MAX_HEADER_LEN || hlen > rest.len() {
        return Err(CheckpointError::MalformedHeader(format!(
            "header length {hlen} out of range"
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let s = header.shape;
    if s.input == 0 || s.hidden1 == 0 || s.hidden2 == 0 {
        return Err(CheckpointError::MalformedHeader("empty layer".into()));
    }
    s.input
        .checked_mul(s.hidden1)
        .and_then(|a| s.hidden2.checked_mul(s.hidden1).and_then(|b| a.checked_add(b)))
        .filter(|n| *n <= MAX_PARAMS)
        .ok_or_else(|| CheckpointError::MalformedHeader("network too large".into()))?;
    let layout = s.layout();
    if header.param_count != layout.len {
        return Err(CheckpointError::MalformedHeader(format!(
            "param_count {} does not match shape ({})",
            header.param_count, layout.len
        )));
    }
    if header.layers != layers_of(&s) {
        return Err(CheckpointError::MalformedHeader(
            "layer list does not match shape".into(),
        ));
    }
    if !header.binary_scale.is_finite() {
        return Err(CheckpointError::MalformedHeader("binary_scale must be finite".into()));
    }
    if !header.action_scale.is_finite() || header.action_scale <= 0.0 {
        return Err(CheckpointError::MalformedHeader("action_scale must be positive".into()));
    }
    let rest = &rest[hlen..];
    let need = 4 * layout.len;
    if rest.len() < need + 4 {
        return Err(CheckpointError::Truncated {
            expected: need + 4,
            found: rest.len(),
        });
    }
    if rest.len() > need + 4 {
        return Err(CheckpointError::TrailingBytes(rest.len() - need - 4));
    }
    let payload = &rest[..need];
    let stored = u32::from_le_bytes(rest[need..need + 4].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut data = Vec::with_capacity(layout.len);
    for (k, c) in payload.chunks_exact(4).enumerate() {
        let w = f32::from_le_bytes(c.try_into().unwrap());
        if !w.is_finite() {
            return Err(CheckpointError::NonFinite(k));
        }
        data.push(w as f64);
    }
    let mut params = PolicyParams::from_data(s, header.action_scale, data)
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?
        .with_binary_scale(header.binary_scale);
    params.clamp_log_std();
    Ok((params, header))
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, cfg_hash: &str) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params, cfg_hash))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, CheckpointHeader), CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
