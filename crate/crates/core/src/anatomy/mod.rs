//! Voxel anatomy: label volumes, synthetic case generation and the BVOL file
//! format.
//!
//! A [`LabelVolume`] stores one byte per voxel, each byte a bitmask of
//! [`Label`]s. Voxel `(ix, iy, iz)` has its center at
//! `origin + (ix, iy, iz) * spacing` in world millimetres, and the payload is
//! ordered x-fastest, then y, then z.

mod io;
mod synth;

pub use io::{decode_volume, encode_volume, load_volume, save_volume, VolumeIoError, BVOL_MAGIC};
pub use synth::{generate_synthetic, AnatomySpec, LesionShape, LesionSize, VolumeGrid};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnatomyError {
    #[error("invalid anatomy: {0}")]
    Validation(String),
    #[error("no target: volume has no lesion voxels")]
    NoTarget,
}

/// Segmentation label. The discriminant is the bit used in the voxel mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Prostate,
    Lesion,
    Rectum,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Prostate, Label::Lesion, Label::Rectum];

    #[inline]
    pub const fn bit(self) -> u8 {
        match self {
            Label::Prostate => 0b001,
            Label::Lesion => 0b010,
            Label::Rectum => 0b100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Point3,
    voxels: Vec<u8>,
}

impl LabelVolume {
    /// An all-background volume.
    pub fn empty(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self, AnatomyError> {
        let len = checked_len(dims)?;
        Self::from_raw(dims, spacing, origin, vec![0; len])
    }

    pub fn from_raw(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Point3,
        voxels: Vec<u8>,
    ) -> Result<Self, AnatomyError> {
        let len = checked_len(dims)?;
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(AnatomyError::Validation(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(AnatomyError::Validation(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        if voxels.len() != len {
            return Err(AnatomyError::Validation(format!(
                "voxel array has {} entries, dims {:?} need {len}",
                voxels.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            voxels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.voxels[self.index(ix, iy, iz)]
    }

    pub fn set_label(&mut self, ix: usize, iy: usize, iz: usize, label: Label, on: bool) {
        let idx = self.index(ix, iy, iz);
        if on {
            self.voxels[idx] |= label.bit();
        } else {
            self.voxels[idx] &= !label.bit();
        }
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Point3 {
        [
            self.origin[0] + ix as f64 * self.spacing[0],
            self.origin[1] + iy as f64 * self.spacing[1],
            self.origin[2] + iz as f64 * self.spacing[2],
        ]
    }

    /// Nearest voxel to a world point, or `None` outside the volume.
    #[inline]
    pub fn voxel_at(&self, p: Point3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let c = ((p[a] - self.origin[a]) / self.spacing[a] + 0.5).floor();
            if !(c >= 0.0 && c < self.dims[a] as f64) {
                return None;
            }
            idx[a] = c as usize;
        }
        Some(idx)
    }

    /// Label mask at a world point by nearest-voxel lookup; 0 outside.
    #[inline]
    pub fn sample(&self, p: Point3) -> u8 {
        match self.voxel_at(p) {
            Some([x, y, z]) => self.get(x, y, z),
            None => 0,
        }
    }

    /// World-space extent `[min, max]` covered by voxel cells on each axis.
    pub fn bounds(&self) -> [[f64; 2]; 3] {
        let mut b = [[0.0; 2]; 3];
        for a in 0..3 {
            b[a][0] = self.origin[a] - 0.5 * self.spacing[a];
            b[a][1] = self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a];
        }
        b
    }

    pub fn count(&self, label: Label) -> usize {
        let bit = label.bit();
        self.voxels.iter().filter(|v| **v & bit != 0).count()
    }

    /// Iterate voxel indices carrying `label`.
    pub fn iter_label(&self, label: Label) -> impl Iterator<Item = [usize; 3]> + '_ {
        let bit = label.bit();
        let [nx, ny, _] = self.dims;
        self.voxels
            .iter()
            .enumerate()
            .filter(move |(_, v)| **v & bit != 0)
            .map(move |(i, _)| {
                let ix = i % nx;
                let iy = (i / nx) % ny;
                let iz = i / (nx * ny);
                [ix, iy, iz]
            })
    }

    /// Lesion volume in cubic centimetres.
    pub fn lesion_volume_cc(&self) -> f64 {
        self.count(Label::Lesion) as f64 * self.voxel_volume_mm3() / 1000.0
    }

    /// Mean world position of lesion voxel centers.
    pub fn lesion_centroid(&self) -> Result<Point3, AnatomyError> {
        self.label_centroid(Label::Lesion).ok_or(AnatomyError::NoTarget)
    }

    pub fn label_centroid(&self, label: Label) -> Option<Point3> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for [x, y, z] in self.iter_label(label) {
            let c = self.voxel_center(x, y, z);
            for a in 0..3 {
                sum[a] += c[a];
            }
            n += 1;
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }

    /// Voxel shift that [`translate_mask`](Self::translate_mask) applies for a
    /// millimetre offset.
    pub fn voxel_shift(&self, offset_mm: Point3) -> [i64; 3] {
        let mut shift = [0i64; 3];
        for a in 0..3 {
            shift[a] = (offset_mm[a] / self.spacing[a]).round() as i64;
        }
        shift
    }

    /// Copy with `label` rigidly shifted by `offset_mm`, rounded to whole
    /// voxels. Other labels are untouched; voxels shifted out are dropped.
    pub fn translate_mask(&self, label: Label, offset_mm: Point3) -> LabelVolume {
        let members: Vec<[usize; 3]> = self.iter_label(label).collect();
        self.translate_members(label, &members, offset_mm)
    }

    /// [`Self::translate_mask`] given the voxels carrying `label`, as listed
    /// by [`Self::iter_label`].
    pub fn translate_members(&self, label: Label, members: &[[usize; 3]], offset_mm: Point3) -> LabelVolume {
        let shift = self.voxel_shift(offset_mm);
        let mut out = self.clone();
        if shift == [0, 0, 0] {
            return out;
        }
        let bit = label.bit();
        for &[x, y, z] in members {
            let i = self.index(x, y, z);
            out.voxels[i] &= !bit;
        }
        for &[x, y, z] in members {
            let t: [i64; 3] = [x as i64 + shift[0], y as i64 + shift[1], z as i64 + shift[2]];
            if (0..3).all(|a| t[a] >= 0 && t[a] < self.dims[a] as i64) {
                let dst = self.index(t[0] as usize, t[1] as usize, t[2] as usize);
                out.voxels[dst] |= bit;
            }
        }
        out
    }

    /// Mirror image in x about the volume's central x plane.
    pub fn mirrored_x(&self) -> LabelVolume {
        let mut out = self.clone();
        let [nx, ny, nz] = self.dims;
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let dst = out.index(nx - 1 - ix, iy, iz);
                    out.voxels[dst] = self.get(ix, iy, iz);
                }
            }
        }
        out
    }
}

fn checked_len(dims: [usize; 3]) -> Result<usize, AnatomyError> {
    if dims.contains(&0) {
        return Err(AnatomyError::Validation(format!("dims must be >= 1, got {dims:?}")));
    }
    dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| AnatomyError::Validation(format!("dims {dims:?} overflow")))
}

pub(crate) fn norm(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
