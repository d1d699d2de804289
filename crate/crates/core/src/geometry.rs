//! Template grid, probe, imaging-plane resampling and needle geometry.
//!
//! World frame (mm): the template lies in the plane z = 0 and needles advance
//! along +z. Column `i` sits at x = (i - 6) * 5 and row `j` at y = j * 5. The
//! probe axis runs parallel to z beneath the grid at (x = 0, y = -r_p), so the
//! top of the probe touches the bottom template row.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{Label, LabelVolume, Point3};

pub const GRID_SIZE: usize = 13;
pub const GRID_PITCH_MM: f64 = 5.0;
pub const CENTER_COLUMN: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("template hole ({0}, {1}) is outside the 13x13 grid")]
    HoleOutOfRange(i64, i64),
}

/// A template hole, `i` = column, `j` = row; both in `0..13`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hole {
    pub i: u8,
    pub j: u8,
}

impl Hole {
    pub fn new(i: i64, j: i64) -> Result<Self, GeometryError> {
        let max = GRID_SIZE as i64 - 1;
        if (0..=max).contains(&i) && (0..=max).contains(&j) {
            Ok(Self { i: i as u8, j: j as u8 })
        } else {
            Err(GeometryError::HoleOutOfRange(i, j))
        }
    }

    /// Clamp arbitrary integer indices onto the grid.
    pub fn clamped(i: i64, j: i64) -> Self {
        let max = GRID_SIZE as i64 - 1;
        Self {
            i: i.clamp(0, max) as u8,
            j: j.clamp(0, max) as u8,
        }
    }

    pub fn all() -> impl Iterator<Item = Hole> {
        (0..GRID_SIZE as u8).flat_map(|j| (0..GRID_SIZE as u8).map(move |i| Hole { i, j }))
    }

    /// Template-plane position in mm.
    pub fn world(self) -> (f64, f64) {
        (
            (self.i as f64 - CENTER_COLUMN as f64) * GRID_PITCH_MM,
            self.j as f64 * GRID_PITCH_MM,
        )
    }

    /// Hole nearest to a template-plane position, clamped to the grid.
    pub fn nearest(x: f64, y: f64) -> Self {
        let i = (x / GRID_PITCH_MM + CENTER_COLUMN as f64).round();
        let j = (y / GRID_PITCH_MM).round();
        Self::clamped(i as i64, j as i64)
    }

    pub fn needle_line(self) -> Line {
        let (x, y) = self.world();
        Line {
            point: [x, y, 0.0],
            dir: [0.0, 0.0, 1.0],
        }
    }
}

/// `grid_to_world` with index validation.
pub fn grid_to_world(i: i64, j: i64) -> Result<(f64, f64), GeometryError> {
    Ok(Hole::new(i, j)?.world())
}

pub fn needle_line(i: i64, j: i64) -> Result<Line, GeometryError> {
    Ok(Hole::new(i, j)?.needle_line())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub radius_mm: f64,
}

impl Default for ProbeModel {
    fn default() -> Self {
        Self { radius_mm: 10.0 }
    }
}

impl ProbeModel {
    pub fn axis_y(&self) -> f64 {
        -self.radius_mm
    }

    /// Rotation of the sagittal imaging plane that contains the needle line of
    /// `hole`, measured from vertical (positive toward +x).
    pub fn plane_angle(&self, hole: Hole) -> f64 {
        let (x, y) = hole.world();
        x.atan2(y - self.axis_y())
    }

    /// Signed distance of `p` from the imaging plane at angle `theta`.
    pub fn plane_distance(&self, p: Point3, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        p[0] * c - (p[1] - self.axis_y()) * s
    }

    /// Radial in-plane coordinate `v` (measured from the probe surface) of a
    /// hole's needle line.
    pub fn hole_v(&self, hole: Hole) -> f64 {
        let (x, y) = hole.world();
        (x * x + (y - self.axis_y()).powi(2)).sqrt() - self.radius_mm
    }

    /// World point of in-plane coordinates `(u, v)` on the plane at `theta`.
    #[inline]
    pub fn plane_point(&self, theta: f64, u: f64, v: f64) -> Point3 {
        let (s, c) = theta.sin_cos();
        let rho = self.radius_mm + v;
        [s * rho, self.axis_y() + c * rho, u]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneWindow {
    pub depth_mm: f64,
    pub height_mm: f64,
    pub res: usize,
}

impl Default for PlaneWindow {
    fn default() -> Self {
        Self {
            depth_mm: 96.0,
            height_mm: 96.0,
            res: 64,
        }
    }
}

impl PlaneWindow {
    pub fn pixel_u(&self) -> f64 {
        self.depth_mm / self.res as f64
    }

    pub fn pixel_v(&self) -> f64 {
        self.height_mm / self.res as f64
    }

    /// Depth (mm) of the center of pixel column `col`.
    pub fn u_of(&self, col: usize) -> f64 {
        (col as f64 + 0.5) * self.pixel_u()
    }

    pub fn v_of(&self, row: usize) -> f64 {
        (row as f64 + 0.5) * self.pixel_v()
    }
}

/// Two-channel binary image of an imaging plane. Rows index the radial
/// coordinate `v`, columns the depth `u`; each channel is row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaneImage {
    pub res: usize,
    pub prostate: Vec<u8>,
    pub lesion: Vec<u8>,
}

impl PlaneImage {
    pub fn zeros(res: usize) -> Self {
        Self {
            res,
            prostate: vec![0; res * res],
            lesion: vec![0; res * res],
        }
    }

    pub fn channel(&self, label: Label) -> &[u8] {
        match label {
            Label::Lesion => &self.lesion,
            _ => &self.prostate,
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.channel(label).iter().filter(|p| **p != 0).count()
    }

    /// Flattened indices of set pixels over `[prostate, lesion]`, ascending.
    pub fn active_indices(&self) -> Vec<u32> {
        let n = self.res * self.res;
        let mut out = Vec::with_capacity(1024);
        for (k, p) in self.prostate.iter().enumerate() {
            if *p != 0 {
                out.push(k as u32);
            }
        }
        for (k, p) in self.lesion.iter().enumerate() {
            if *p != 0 {
                out.push((n + k) as u32);
            }
        }
        out
    }

    /// Both channels concatenated, prostate first.
    pub fn to_flat(&self) -> Vec<u8> {
        let mut v = self.prostate.clone();
        v.extend_from_slice(&self.lesion);
        v
    }

    pub fn from_flat(res: usize, flat: &[u8]) -> Option<Self> {
        let n = res.checked_mul(res)?;
        if flat.len() != 2 * n {
            return None;
        }
        Some(Self {
            res,
            prostate: flat[..n].to_vec(),
            lesion: flat[n..].to_vec(),
        })
    }
}

/// Nearest-voxel resampling of the prostate and lesion labels on the imaging
/// plane at angle `theta`. Samples outside the volume read as background.
pub fn resample_plane(vol: &LabelVolume, theta: f64, probe: &ProbeModel, window: &PlaneWindow) -> PlaneImage {
    let res = window.res;
    let mut img = PlaneImage::zeros(res);
    let origin = vol.origin();
    let spacing = vol.spacing();
    let dims = vol.dims();
    let index = |c: f64, a: usize| -> Option<usize> {
        let k = ((c - origin[a]) / spacing[a] + 0.5).floor();
        (k >= 0.0 && k < dims[a] as f64).then_some(k as usize)
    };
    let cols: Vec<Option<usize>> = (0..res).map(|col| index(window.u_of(col), 2)).collect();
    let (pb, lb) = (Label::Prostate.bit(), Label::Lesion.bit());
    for row in 0..res {
        let p = probe.plane_point(theta, 0.0, window.v_of(row));
        let (Some(ix), Some(iy)) = (index(p[0], 0), index(p[1], 1)) else {
            continue;
        };
        for (col, iz) in cols.iter().enumerate() {
            let Some(iz) = *iz else { continue };
            let m = vol.get(ix, iy, iz);
            let k = row * res + col;
            img.prostate[k] = (m & pb != 0) as u8;
            img.lesion[k] = (m & lb != 0) as u8;
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub point: Point3,
    /// Unit direction.
    pub dir: Point3,
}

impl Line {
    pub fn at(&self, t: f64) -> Point3 {
        std::array::from_fn(|a| self.point[a] + t * self.dir[a])
    }
}

pub fn point_line_distance(p: Point3, line: &Line) -> f64 {
    let d: Point3 = std::array::from_fn(|a| p[a] - line.point[a]);
    let t: f64 = (0..3).map(|a| d[a] * line.dir[a]).sum();
    let perp: Point3 = std::array::from_fn(|a| d[a] - t * line.dir[a]);
    crate::anatomy::norm(perp)
}

/// A biopsy core: a segment of the needle line of `hole` centered at depth
/// `center_depth_mm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreSegment {
    pub hole: Hole,
    pub center_depth_mm: f64,
    pub length_mm: f64,
}

impl CoreSegment {
    pub fn start_depth(&self) -> f64 {
        self.center_depth_mm - 0.5 * self.length_mm
    }

    pub fn end_depth(&self) -> f64 {
        self.center_depth_mm + 0.5 * self.length_mm
    }
}

pub const DEFAULT_STEP_MM: f64 = 0.25;

/// Length of `seg` lying in `label` voxels, by midpoint sampling every
/// `step_mm` along the core.
pub fn segment_mask_length(vol: &LabelVolume, label: Label, seg: &CoreSegment, step_mm: f64) -> f64 {
    if !(seg.length_mm > 0.0) {
        return 0.0;
    }
    let n = (seg.length_mm / step_mm).ceil().max(1.0) as usize;
    let dz = seg.length_mm / n as f64;
    let (x, y) = seg.hole.world();
    let bit = label.bit();
    let z0 = seg.start_depth();
    let hits = (0..n)
        .filter(|k| vol.sample([x, y, z0 + (*k as f64 + 0.5) * dz]) & bit != 0)
        .count();
    hits as f64 * dz
}

/// True iff some sample along `line` inside the volume carries `label`,
/// sampling at half the smallest voxel spacing.
pub fn line_intersects_mask(vol: &LabelVolume, label: Label, line: &Line) -> bool {
    let Some((t0, t1)) = clip_to_box(line, vol.bounds()) else {
        return false;
    };
    let step = vol.spacing().iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    let bit = label.bit();
    let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
    let dt = (t1 - t0) / n as f64;
    (0..=n).any(|k| vol.sample(line.at(t0 + k as f64 * dt)) & bit != 0)
}

/// Parameter interval of `line` inside an axis-aligned box (slab method).
fn clip_to_box(line: &Line, bounds: [[f64; 2]; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let [lo, hi] = bounds[a];
        if line.dir[a].abs() < 1e-15 {
            if line.point[a] < lo || line.point[a] > hi {
                return None;
            }
            continue;
        }
        let ta = (lo - line.point[a]) / line.dir[a];
        let tb = (hi - line.point[a]) / line.dir[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1).then_some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{generate_synthetic, AnatomySpec, LesionSize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exact length of a z-parallel segment inside labelled nearest-voxel
    /// cells: walks the single voxel column the line falls in and sums cell
    /// overlaps.
    fn voxel_march_length(vol: &LabelVolume, label: Label, seg: &CoreSegment) -> f64 {
        let (x, y) = seg.hole.world();
        let Some([ix, iy, _]) = vol.voxel_at([x, y, vol.origin()[2]]) else {
            return 0.0;
        };
        let s = vol.spacing()[2];
        let (z0, z1) = (seg.start_depth(), seg.end_depth());
        (0..vol.dims()[2])
            .filter(|iz| vol.get(ix, iy, *iz) & label.bit() != 0)
            .map(|iz| {
                let c = vol.origin()[2] + iz as f64 * s;
                ((c + s / 2.0).min(z1) - (c - s / 2.0).max(z0)).max(0.0)
            })
            .sum()
    }

    fn sphere_case(center: Point3, r: f64) -> LabelVolume {
        generate_synthetic(&AnatomySpec::default().with_lesion(center, LesionSize::RadiusMm(r))).unwrap()
    }

    #[test]
    fn grid_to_world_examples() {
        assert_eq!(grid_to_world(6, 0).unwrap(), (0.0, 0.0));
        assert_eq!(grid_to_world(0, 0).unwrap(), (-30.0, 0.0));
        assert_eq!(grid_to_world(12, 12).unwrap(), (30.0, 60.0));
        assert_eq!(grid_to_world(13, 0), Err(GeometryError::HoleOutOfRange(13, 0)));
        assert!(grid_to_world(0, -1).is_err());
    }

    #[test]
    fn grid_is_injective_with_exact_pitch() {
        let pts: Vec<_> = Hole::all().map(|h| h.world()).collect();
        for (a, p) in pts.iter().enumerate() {
            for q in &pts[a + 1..] {
                assert_ne!(p, q);
            }
        }
        for h in Hole::all() {
            let (x, y) = h.world();
            if h.i < 12 {
                let (x2, y2) = Hole { i: h.i + 1, ..h }.world();
                assert_eq!(((x2 - x).powi(2) + (y2 - y).powi(2)).sqrt(), 5.0);
            }
        }
        assert_eq!(Hole::all().count(), 169);
    }

    #[test]
    fn plane_angle_examples() {
        let probe = ProbeModel::default();
        assert_eq!(probe.plane_angle(Hole { i: 6, j: 0 }), 0.0);
        let theta = probe.plane_angle(Hole { i: 12, j: 0 });
        assert!((theta - 30f64.atan2(10.0)).abs() < 1e-12);
        assert!((theta - 1.2490).abs() < 1e-4);
        for k in 1..=6u8 {
            for j in 0..13u8 {
                let a = probe.plane_angle(Hole { i: 6 - k, j });
                let b = probe.plane_angle(Hole { i: 6 + k, j });
                assert_eq!(a, -b);
            }
        }
    }

    #[test]
    fn needle_lines_lie_in_their_planes() {
        let probe = ProbeModel::default();
        for h in Hole::all() {
            let theta = probe.plane_angle(h);
            let line = h.needle_line();
            for t in [0.0, 17.3, 60.0, 96.0] {
                assert!(probe.plane_distance(line.at(t), theta).abs() < 1e-9);
            }
            // and the in-plane coordinate of the line maps back to the hole
            let p = probe.plane_point(theta, 10.0, probe.hole_v(h));
            let (x, y) = h.world();
            assert!((p[0] - x).abs() < 1e-9 && (p[1] - y).abs() < 1e-9);
        }
    }

    #[test]
    fn needle_line_examples() {
        let l = needle_line(6, 0).unwrap();
        assert_eq!(
            l,
            Line {
                point: [0.0; 3],
                dir: [0.0, 0.0, 1.0]
            }
        );
        let a = needle_line(2, 3).unwrap();
        let b = needle_line(5, 7).unwrap();
        assert_eq!(a.dir, b.dir);
        // holes 3 columns and 4 rows apart
        assert!((point_line_distance(a.point, &b) - 5.0 * 5.0).abs() < 1e-12);
        assert!(needle_line(-1, 0).is_err());
    }

    #[test]
    fn point_line_distance_examples() {
        let axis = Line {
            point: [0.0; 3],
            dir: [0.0, 0.0, 1.0],
        };
        assert_eq!(point_line_distance([10.0, 0.0, 0.0], &axis), 10.0);
        assert_eq!(point_line_distance([0.0, 0.0, 42.0], &axis), 0.0);
        assert_eq!(point_line_distance([3.0, 4.0, 17.0], &axis), 5.0);
    }

    #[test]
    fn resample_empty_volume() {
        let vol = LabelVolume::empty([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let img = resample_plane(&vol, 0.3, &ProbeModel::default(), &PlaneWindow::default());
        assert!(img.active_indices().is_empty());
    }

    #[test]
    fn resample_lesion_disc_area() {
        // r = 5 sphere centered on the theta = 0 plane
        let vol = sphere_case([0.0, 30.0, 48.0], 5.0);
        let img = resample_plane(&vol, 0.0, &ProbeModel::default(), &PlaneWindow::default());
        let expected = std::f64::consts::PI * 25.0 / (1.5 * 1.5);
        assert!((expected - 34.9).abs() < 0.05);
        let got = img.count(Label::Lesion) as f64;
        assert!((got - expected).abs() / expected <= 0.2, "{got} vs {expected}");
    }

    #[test]
    fn resample_mirror_symmetry() {
        let vol = sphere_case([7.0, 27.0, 44.0], 6.0);
        let mirrored = vol.mirrored_x();
        let probe = ProbeModel::default();
        let w = PlaneWindow::default();
        for h in [Hole { i: 9, j: 4 }, Hole { i: 11, j: 7 }, Hole { i: 7, j: 2 }] {
            let theta = probe.plane_angle(h);
            assert_eq!(
                resample_plane(&mirrored, -theta, &probe, &w),
                resample_plane(&vol, theta, &probe, &w)
            );
        }
    }

    #[test]
    fn on_plane_lesion_voxels_are_visible() {
        // Holds whenever pixels are no larger than voxels. At the default
        // 1.5mm pixels nearest-voxel lookup skips every third 1mm voxel row.
        let probe = ProbeModel::default();
        let w = PlaneWindow {
            res: 128,
            ..PlaneWindow::default()
        };
        for (iy, iz) in [(50, 40), (51, 41), (31, 7), (90, 95)] {
            let mut vol = LabelVolume::empty([97, 97, 97], [1.0; 3], [-48.0, -20.0, 0.0]).unwrap();
            // x index 48 is world x = 0, on the theta = 0 plane
            vol.set_label(48, iy, iz, Label::Lesion, true);
            let img = resample_plane(&vol, 0.0, &probe, &w);
            assert!(img.count(Label::Lesion) > 0, "voxel ({iy}, {iz})");
        }
    }

    #[test]
    fn chord_through_center_is_diameter() {
        // centered between voxel layers in z so the voxelized chord is unbiased
        let vol = sphere_case([0.0, 30.0, 48.5], 5.0);
        let seg = CoreSegment {
            hole: Hole { i: 6, j: 6 },
            center_depth_mm: 48.5,
            length_mm: 20.0,
        };
        let len = segment_mask_length(&vol, Label::Lesion, &seg, DEFAULT_STEP_MM);
        assert!((len - 10.0).abs() <= 0.5, "{len}");
    }

    #[test]
    fn chord_at_offset() {
        // line 3mm from the center of an r = 5 sphere: chord 2 sqrt(25 - 9) = 8
        let vol = sphere_case([3.0, 30.0, 48.5], 5.0);
        let seg = CoreSegment {
            hole: Hole { i: 6, j: 6 },
            center_depth_mm: 48.5,
            length_mm: 20.0,
        };
        let len = segment_mask_length(&vol, Label::Lesion, &seg, DEFAULT_STEP_MM);
        let oracle = voxel_march_length(&vol, Label::Lesion, &seg);
        assert!((len - 8.0).abs() <= 0.5, "{len}");
        assert!((len - oracle).abs() <= DEFAULT_STEP_MM * 2.0, "{len} vs march {oracle}");
    }

    #[test]
    fn segment_outside_and_degenerate() {
        let vol = sphere_case([0.0, 30.0, 48.0], 5.0);
        let seg = CoreSegment {
            hole: Hole { i: 0, j: 0 },
            center_depth_mm: 48.0,
            length_mm: 20.0,
        };
        assert_eq!(segment_mask_length(&vol, Label::Lesion, &seg, DEFAULT_STEP_MM), 0.0);
        let zero = CoreSegment {
            hole: Hole { i: 6, j: 6 },
            center_depth_mm: 48.0,
            length_mm: 0.0,
        };
        assert_eq!(segment_mask_length(&vol, Label::Lesion, &zero, DEFAULT_STEP_MM), 0.0);
    }

    #[test]
    fn sampled_length_tracks_voxel_march() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let c = [
                rng.random_range(-5.0..5.0),
                rng.random_range(25.0..35.0),
                rng.random_range(40.0..55.0),
            ];
            let vol = sphere_case(c, rng.random_range(2.0..8.0));
            let seg = CoreSegment {
                hole: Hole::nearest(c[0] + rng.random_range(-6.0..6.0), c[1] + rng.random_range(-6.0..6.0)),
                center_depth_mm: c[2] + rng.random_range(-8.0..8.0),
                length_mm: 20.0,
            };
            let len = segment_mask_length(&vol, Label::Lesion, &seg, DEFAULT_STEP_MM);
            let oracle = voxel_march_length(&vol, Label::Lesion, &seg);
            assert!((len - oracle).abs() <= 2.0 * DEFAULT_STEP_MM, "{len} vs {oracle}");
        }
    }

    #[test]
    fn line_intersection_examples() {
        let vol = sphere_case([0.0, 30.0, 48.0], 5.0);
        assert!(line_intersects_mask(
            &vol,
            Label::Prostate,
            &Hole { i: 6, j: 6 }.needle_line()
        ));
        let far = Line {
            point: [200.0, 30.0, 0.0],
            dir: [0.0, 0.0, 1.0],
        };
        assert!(!line_intersects_mask(&vol, Label::Prostate, &far));
        // tangent line at r + spacing from the lesion center
        let tangent = Line {
            point: [6.0, 30.0, 0.0],
            dir: [0.0, 0.0, 1.0],
        };
        assert!(!line_intersects_mask(&vol, Label::Lesion, &tangent));
        let inside = Line {
            point: [5.0, 30.0, 0.0],
            dir: [0.0, 0.0, 1.0],
        };
        assert!(line_intersects_mask(&vol, Label::Lesion, &inside));
        // oblique lines are clipped to the volume too
        let oblique = Line {
            point: [-60.0, 30.0, 48.0],
            dir: [1.0, 0.0, 0.0],
        };
        assert!(line_intersects_mask(&vol, Label::Lesion, &oblique));
    }

    #[test]
    fn nearest_hole_snaps_and_clamps() {
        assert_eq!(Hole::nearest(5.0, 30.0), Hole { i: 7, j: 6 });
        assert_eq!(Hole::nearest(6.0, 31.0), Hole { i: 7, j: 6 });
        assert_eq!(Hole::nearest(-100.0, 100.0), Hole { i: 0, j: 12 });
    }
}
