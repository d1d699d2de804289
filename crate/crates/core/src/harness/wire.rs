//! Observation wire format.
//!
//! Both channels are bit-packed row-major, prostate first, most significant
//! bit first, and the bit string is zero-padded to a whole byte before base64
//! encoding. `dims` is `[channels, rows, cols]`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Observation;
use crate::geometry::{Hole, PlaneImage, GRID_SIZE};

pub const CHANNELS: usize = 2;
/// Largest plane side accepted from the wire.
pub const MAX_WIRE_RES: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("bad dims {0:?}: expected [2, n, n] with 1 <= n <= 1024")]
    BadDims([usize; 3]),
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("packed planes hold {found} bytes, dims need {expected}")]
    Length { expected: usize, found: usize },
    #[error("padding bits are not zero")]
    Padding,
    #[error("grid position ({0}, {1}) is off the template")]
    Grid(u8, u8),
    #[error("malformed observation: {0}")]
    Json(String),
}

/// An observation as sent to remote agents and operator clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireObservation {
    pub dims: [usize; 3],
    pub planes: String,
    /// Current hole `[i, j]`.
    pub grid: [u8; 2],
}

pub fn pack_planes(plane: &PlaneImage) -> Vec<u8> {
    let bits = plane.prostate.iter().chain(&plane.lesion);
    let mut out = vec![0u8; (CHANNELS * plane.res * plane.res).div_ceil(8)];
    for (k, p) in bits.enumerate() {
        if *p != 0 {
            out[k / 8] |= 0x80 >> (k % 8);
        }
    }
    out
}

pub fn unpack_planes(res: usize, bytes: &[u8]) -> Result<PlaneImage, WireError> {
    let n = res * res;
    let expected = (CHANNELS * n).div_ceil(8);
    if bytes.len() != expected {
        return Err(WireError::Length {
            expected,
            found: bytes.len(),
        });
    }
    let used = CHANNELS * n;
    if !used.is_multiple_of(8) && bytes[expected - 1] & (0xff >> (used % 8)) != 0 {
        return Err(WireError::Padding);
    }
    let bit = |k: usize| (bytes[k / 8] >> (7 - k % 8)) & 1;
    Ok(PlaneImage {
        res,
        prostate: (0..n).map(bit).collect(),
        lesion: (n..2 * n).map(bit).collect(),
    })
}

impl WireObservation {
    pub fn encode(obs: &Observation) -> Self {
        let res = obs.plane.res;
        Self {
            dims: [CHANNELS, res, res],
            planes: STANDARD.encode(pack_planes(&obs.plane)),
            grid: [obs.hole.i, obs.hole.j],
        }
    }

    pub fn decode(&self) -> Result<Observation, WireError> {
        let [c, rows, cols] = self.dims;
        if c != CHANNELS || rows != cols || rows == 0 || rows > MAX_WIRE_RES {
            return Err(WireError::BadDims(self.dims));
        }
        let [i, j] = self.grid;
        if i as usize >= GRID_SIZE || j as usize >= GRID_SIZE {
            return Err(WireError::Grid(i, j));
        }
        let bytes = STANDARD
            .decode(self.planes.as_bytes())
            .map_err(|e| WireError::Base64(e.to_string()))?;
        Ok(Observation::new(unpack_planes(rows, &bytes)?, Hole { i, j }))
    }
}

/// Parses and decodes a JSON observation from untrusted bytes.
pub fn decode_wire_observation(bytes: &[u8]) -> Result<Observation, WireError> {
    let w: WireObservation = serde_json::from_slice(bytes).map_err(|e| WireError::Json(e.to_string()))?;
    w.decode()
}
