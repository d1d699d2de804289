use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnatomyError, Label, LabelVolume, Point3};

/// Voxel lattice of a generated volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: Point3,
}

impl Default for VolumeGrid {
    /// 97³ voxels at 1mm, x centered on the template's middle column, y from
    /// below the probe up past the top template row, z from the template plane.
    fn default() -> Self {
        Self {
            dims: [97, 97, 97],
            spacing_mm: [1.0; 3],
            origin_mm: [-48.0, -20.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionSize {
    RadiusMm(f64),
    VolumeCc(f64),
}

impl LesionSize {
    pub fn radius_mm(self) -> f64 {
        match self {
            LesionSize::RadiusMm(r) => r,
            LesionSize::VolumeCc(cc) => (3.0 * cc * 1000.0 / (4.0 * PI)).cbrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionShape {
    #[default]
    Sphere,
    /// Volume-preserving ellipsoid with per-axis factors drawn from the seed.
    Ellipsoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomySpec {
    pub grid: VolumeGrid,
    pub prostate_semi_axes_mm: [f64; 3],
    pub prostate_center_mm: Point3,
    pub lesion_center_mm: Point3,
    pub lesion_size: LesionSize,
    #[serde(default)]
    pub lesion_shape: LesionShape,
    pub rectum_radius_mm: f64,
    /// y of the rectum cylinder axis; the cylinder runs along z.
    pub rectum_center_y_mm: f64,
    pub seed: u64,
}

impl Default for AnatomySpec {
    fn default() -> Self {
        Self {
            grid: VolumeGrid::default(),
            prostate_semi_axes_mm: [25.0, 20.0, 22.5],
            prostate_center_mm: [0.0, 30.0, 48.0],
            lesion_center_mm: [2.5, 32.5, 48.0],
            lesion_size: LesionSize::VolumeCc(0.4),
            lesion_shape: LesionShape::Sphere,
            rectum_radius_mm: 8.0,
            rectum_center_y_mm: -10.0,
            seed: 0,
        }
    }
}

impl AnatomySpec {
    pub fn with_lesion(mut self, center: Point3, size: LesionSize) -> Self {
        self.lesion_center_mm = center;
        self.lesion_size = size;
        self
    }

    /// Lesion semi-axes after applying the shape option.
    pub fn lesion_semi_axes(&self) -> [f64; 3] {
        let r = self.lesion_size.radius_mm();
        match self.lesion_shape {
            LesionShape::Sphere => [r; 3],
            LesionShape::Ellipsoid => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let fx: f64 = rng.random_range(0.8..1.25);
                let fy: f64 = rng.random_range(0.8..1.25);
                [r * fx, r * fy, r / (fx * fy)]
            }
        }
    }

    pub fn validate(&self) -> Result<(), AnatomyError> {
        let bad = |m: String| Err(AnatomyError::Validation(m));
        if self.grid.dims.contains(&0) {
            return bad(format!("grid dims must be >= 1, got {:?}", self.grid.dims));
        }
        if self.grid.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return bad(format!("grid spacing must be positive, got {:?}", self.grid.spacing_mm));
        }
        if self.prostate_semi_axes_mm.iter().any(|a| !(*a > 0.0)) {
            return bad(format!(
                "prostate semi-axes must be positive, got {:?}",
                self.prostate_semi_axes_mm
            ));
        }
        let r = self.lesion_size.radius_mm();
        if !(r >= 0.0 && r.is_finite()) {
            return bad(format!("lesion radius must be finite and >= 0, got {r}"));
        }
        if self.rectum_radius_mm < 0.0 {
            return bad(format!("rectum radius must be >= 0, got {}", self.rectum_radius_mm));
        }

        let lo: Point3 = std::array::from_fn(|a| self.grid.origin_mm[a] - 0.5 * self.grid.spacing_mm[a]);
        let hi: Point3 = std::array::from_fn(|a| {
            self.grid.origin_mm[a] + (self.grid.dims[a] as f64 - 0.5) * self.grid.spacing_mm[a]
        });
        for a in 0..3 {
            let c = self.prostate_center_mm[a];
            let s = self.prostate_semi_axes_mm[a];
            if c - s < lo[a] || c + s > hi[a] {
                return bad(format!("prostate exceeds volume bounds on axis {a}"));
            }
        }
        let (ry, rr) = (self.rectum_center_y_mm, self.rectum_radius_mm);
        if rr > 0.0 && (ry - rr < lo[1] || ry + rr > hi[1] || -rr < lo[0] || rr > hi[0]) {
            return bad("rectum exceeds volume bounds".into());
        }

        if r > 0.0 {
            let axes = self.lesion_semi_axes();
            for p in fibonacci_sphere(2000) {
                let q: Point3 = std::array::from_fn(|a| self.lesion_center_mm[a] + axes[a] * p[a]);
                if ellipsoid_level(q, self.prostate_center_mm, self.prostate_semi_axes_mm) > 1.0 {
                    return bad("lesion is not inside the prostate".into());
                }
            }
        }
        Ok(())
    }
}

/// Voxelize an [`AnatomySpec`]: ellipsoidal prostate, spherical (or
/// ellipsoidal) lesion clipped to the prostate, and an axial rectum cylinder.
pub fn generate_synthetic(spec: &AnatomySpec) -> Result<LabelVolume, AnatomyError> {
    spec.validate()?;
    let g = spec.grid;
    let mut vol = LabelVolume::empty(g.dims, g.spacing_mm, g.origin_mm)?;
    let lesion_r = spec.lesion_size.radius_mm();
    let lesion_axes = spec.lesion_semi_axes();
    let [nx, ny, nz] = g.dims;
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = vol.voxel_center(ix, iy, iz);
                let mut mask = 0u8;
                if ellipsoid_level(p, spec.prostate_center_mm, spec.prostate_semi_axes_mm) <= 1.0 {
                    mask |= Label::Prostate.bit();
                    if lesion_r > 0.0 && ellipsoid_level(p, spec.lesion_center_mm, lesion_axes) <= 1.0 {
                        mask |= Label::Lesion.bit();
                    }
                }
                let (dx, dy) = (p[0], p[1] - spec.rectum_center_y_mm);
                if spec.rectum_radius_mm > 0.0 && dx * dx + dy * dy <= spec.rectum_radius_mm.powi(2) {
                    mask |= Label::Rectum.bit();
                }
                if mask != 0 {
                    let idx = vol.index(ix, iy, iz);
                    vol.voxels[idx] = mask;
                }
            }
        }
    }
    Ok(vol)
}

fn ellipsoid_level(p: Point3, c: Point3, axes: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum()
}

fn fibonacci_sphere(n: usize) -> impl Iterator<Item = Point3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n).map(move |k| {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * k as f64;
        [r * phi.cos(), r * phi.sin(), z]
    })
}
