//! Case storage and synthetic cohort generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::anatomy::{generate_synthetic, load_volume, save_volume, AnatomySpec, LabelVolume, LesionShape, LesionSize};

pub const CASE_EXT: &str = "bvol";
pub const COHORT_FILE: &str = "cohort.json";

#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub volume: Arc<LabelVolume>,
    pub lesion_volume_cc: f64,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: LabelVolume) -> Self {
        let lesion_volume_cc = volume.lesion_volume_cc();
        Self {
            id: id.into(),
            volume: Arc::new(volume),
            lesion_volume_cc,
        }
    }
}

/// Cases by id, iterated in id order.
#[derive(Debug, Clone, Default)]
pub struct CaseStore {
    cases: BTreeMap<String, Case>,
}

impl CaseStore {
    pub fn from_cases(cases: impl IntoIterator<Item = Case>) -> Self {
        Self {
            cases: cases.into_iter().map(|c| (c.id.clone(), c)).collect(),
        }
    }

    pub fn from_volumes(vols: impl IntoIterator<Item = (String, LabelVolume)>) -> Self {
        Self::from_cases(vols.into_iter().map(|(id, v)| Case::new(id, v)))
    }

    /// Loads every `*.bvol` file in `dir`; the file stem is the case id.
    pub fn load_dir(dir: &Path) -> Result<Self, HarnessError> {
        let mut cases = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))? {
            let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(CASE_EXT) {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| HarnessError::Config(format!("bad case file name {}", path.display())))?
                .to_string();
            let vol = load_volume(&path).map_err(|e| HarnessError::Case {
                case: id.clone(),
                reason: e.to_string(),
            })?;
            cases.push(Case::new(id, vol));
        }
        if cases.is_empty() {
            return Err(HarnessError::Config(format!(
                "no .{CASE_EXT} files in {}",
                dir.display()
            )));
        }
        Ok(Self::from_cases(cases))
    }

    pub fn get(&self, id: &str) -> Option<&Case> {
        self.cases.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.cases.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Case> + '_ {
        self.cases.values()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

/// Parameters of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_cases: usize,
    /// Lesion volumes are drawn uniformly from this range.
    pub lesion_cc: [f64; 2],
    /// Each prostate semi-axis is scaled by a factor drawn from this range.
    pub prostate_scale: [f64; 2],
    pub lesion_shape: LesionShape,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_cases: 20,
            lesion_cc: [0.1, 1.0],
            prostate_scale: [0.85, 1.15],
            lesion_shape: LesionShape::Sphere,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.n_cases == 0 {
            return bad("a cohort needs at least one case");
        }
        let [lo, hi] = self.lesion_cc;
        if !(lo > 0.0 && lo <= hi && hi <= 5.0) {
            return bad("lesion_cc must satisfy 0 < min <= max <= 5");
        }
        let [lo, hi] = self.prostate_scale;
        if !(lo >= 0.5 && lo <= hi && hi <= 1.3) {
            return bad("prostate_scale must satisfy 0.5 <= min <= max <= 1.3");
        }
        Ok(())
    }
}

pub fn case_id(k: usize) -> String {
    format!("case-{k:03}")
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Anatomy specs of a synthetic cohort; a pure function of `spec`.
pub fn cohort_specs(spec: &CohortSpec) -> Result<Vec<(String, AnatomySpec)>, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_cases);
    for k in 0..spec.n_cases {
        let base = AnatomySpec::default();
        let axes: [f64; 3] =
            std::array::from_fn(|a| base.prostate_semi_axes_mm[a] * draw(&mut rng, spec.prostate_scale));
        let cc = draw(&mut rng, spec.lesion_cc);
        let mut a = AnatomySpec {
            prostate_semi_axes_mm: axes,
            lesion_size: LesionSize::VolumeCc(cc),
            lesion_shape: spec.lesion_shape,
            seed: rng.random(),
            ..base
        };
        let r = a.lesion_semi_axes().into_iter().fold(0.0, f64::max);
        let room: [f64; 3] = std::array::from_fn(|i| (axes[i] - r - 1.5).max(0.0));
        let mut placed = false;
        for _ in 0..1000 {
            let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if u.iter().map(|x| x * x).sum::<f64>() > 1.0 {
                continue;
            }
            a.lesion_center_mm = std::array::from_fn(|i| a.prostate_center_mm[i] + room[i] * u[i]);
            if a.validate().is_ok() {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(HarnessError::Case {
                case: case_id(k),
                reason: format!("could not place a {cc:.3} cc lesion"),
            });
        }
        out.push((case_id(k), a));
    }
    Ok(out)
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<CaseStore, HarnessError> {
    let mut cases = Vec::new();
    for (id, a) in cohort_specs(spec)? {
        let vol = generate_synthetic(&a).map_err(|e| HarnessError::Case {
            case: id.clone(),
            reason: e.to_string(),
        })?;
        cases.push(Case::new(id, vol));
    }
    Ok(CaseStore::from_cases(cases))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFile {
    pub spec: CohortSpec,
    pub cases: Vec<CohortEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub lesion_volume_cc: f64,
    pub anatomy: AnatomySpec,
}

/// Writes one BVOL file per case plus a `cohort.json` index into `dir`.
pub fn write_cohort(spec: &CohortSpec, dir: &Path) -> Result<CaseStore, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let specs = cohort_specs(spec)?;
    let store = generate_cohort(spec)?;
    let mut entries = Vec::new();
    for ((id, anatomy), case) in specs.into_iter().zip(store.iter()) {
        let path = dir.join(format!("{id}.{CASE_EXT}"));
        save_volume(&case.volume, &path).map_err(|e| HarnessError::Case {
            case: id.clone(),
            reason: e.to_string(),
        })?;
        entries.push(CohortEntry {
            id,
            lesion_volume_cc: case.lesion_volume_cc,
            anatomy,
        });
    }
    let file = CohortFile {
        spec: spec.clone(),
        cases: entries,
    };
    let path = dir.join(COHORT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&file).expect("cohort serializes"))
        .map_err(|e| HarnessError::io(&path, e))?;
    Ok(store)
}
