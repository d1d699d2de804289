//! BVOL/1 volume files.
//!
//! ```text
//! magic   8 bytes   "BVOL\0\x01\0\0"
//! hlen    u32 LE    length of the JSON header in bytes
//! header  hlen      {"dims":[..],"spacing_mm":[..],"origin_mm":[..],"labels":{..}}
//! payload nx*ny*nz  label bytes, x fastest, then y, then z
//! crc     u32 LE    CRC32 (IEEE) of the payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Label, LabelVolume};

pub const BVOL_MAGIC: [u8; 8] = *b"BVOL\x00\x01\x00\x00";

/// Headers larger than this are rejected before parsing.
const MAX_HEADER_LEN: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum VolumeIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a BVOL/1 file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    /// Payload plus checksum shorter than the header's dims require.
    #[error("truncated payload: expected {expected} bytes after the header, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
}

impl VolumeIoError {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            VolumeIoError::Io(_) => "io",
            VolumeIoError::BadMagic => "bad_magic",
            VolumeIoError::MalformedHeader(_) => "malformed_header",
            VolumeIoError::Truncated { .. } => "truncated",
            VolumeIoError::ChecksumMismatch { .. } => "checksum_mismatch",
            VolumeIoError::TrailingBytes(_) => "trailing_bytes",
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct LabelMap {
    prostate: u8,
    lesion: u8,
    rectum: u8,
}

impl LabelMap {
    fn standard() -> Self {
        Self {
            prostate: Label::Prostate.bit(),
            lesion: Label::Lesion.bit(),
            rectum: Label::Rectum.bit(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    labels: LabelMap,
}

pub fn encode_volume(vol: &LabelVolume) -> Vec<u8> {
    let header = Header {
        dims: vol.dims(),
        spacing_mm: vol.spacing(),
        origin_mm: vol.origin(),
        labels: LabelMap::standard(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload = vol.voxels();
    let mut out = Vec::with_capacity(8 + 4 + json.len() + payload.len() + 4);
    out.extend_from_slice(&BVOL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<LabelVolume, VolumeIoError> {
    if bytes.len() < 8 || bytes[..8] != BVOL_MAGIC {
        return Err(VolumeIoError::BadMagic);
    }
    let rest = &bytes[8..];
    if rest.len() < 4 {
        return Err(VolumeIoError::MalformedHeader("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    if hlen > MAX_HEADER_LEN {
        return Err(VolumeIoError::MalformedHeader(format!(
            "header length {hlen} too large"
        )));
    }
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(VolumeIoError::MalformedHeader(format!(
            "header length {hlen} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| VolumeIoError::MalformedHeader(e.to_string()))?;
    if header.labels != LabelMap::standard() {
        return Err(VolumeIoError::MalformedHeader(format!(
            "unsupported label map {:?}",
            header.labels
        )));
    }
    if header.dims.contains(&0) {
        return Err(VolumeIoError::MalformedHeader(format!(
            "dims must be >= 1, got {:?}",
            header.dims
        )));
    }
    let expected = header.dims[0]
        .checked_mul(header.dims[1])
        .and_then(|v| v.checked_mul(header.dims[2]))
        .ok_or_else(|| VolumeIoError::MalformedHeader(format!("dims {:?} overflow", header.dims)))?;

    let rest = &rest[hlen..];
    let needed = expected.saturating_add(4);
    if rest.len() < needed {
        return Err(VolumeIoError::Truncated {
            expected: needed,
            found: rest.len(),
        });
    }
    if rest.len() > needed {
        return Err(VolumeIoError::TrailingBytes(rest.len() - needed));
    }
    let (payload, tail) = rest.split_at(expected);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(VolumeIoError::ChecksumMismatch { stored, computed });
    }
    LabelVolume::from_raw(header.dims, header.spacing_mm, header.origin_mm, payload.to_vec())
        .map_err(|e| VolumeIoError::MalformedHeader(e.to_string()))
}

pub fn save_volume(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeIoError> {
    fs::write(path, encode_volume(vol))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeIoError> {
    decode_volume(&fs::read(path)?)
}
