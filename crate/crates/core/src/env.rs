//! The targeting MDP.
//!
//! Each step moves the probe/needle guide by a relative template offset, fires
//! one needle at the new hole and scores it against the true anatomy. The
//! agent only sees the imaging plane through the (possibly mis-registered)
//! lesion mask plus its normalized grid position.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{Label, LabelVolume, Point3};
use crate::geometry::{
    line_intersects_mask, point_line_distance, resample_plane, segment_mask_length, CoreSegment, Hole, PlaneImage,
    PlaneWindow, ProbeModel, GRID_SIZE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("no target: volume has no lesion voxels")]
    NoTarget,
    #[error("episode finished")]
    EpisodeFinished,
    #[error("environment has not been reset")]
    NotReset,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub max_steps: usize,
    pub hit_quota: usize,
    pub reward_hit: f64,
    pub reward_outside: f64,
    pub gamma: f64,
    /// Per-axis SD of the lesion localisation error.
    pub noise_sd_mm: f64,
    pub depth_noise_sd_mm: f64,
    /// Bound on each component of a relative action, in grid units.
    pub action_range: f64,
    pub window: PlaneWindow,
    pub probe: ProbeModel,
    pub core_length_mm: f64,
    pub sample_step_mm: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 15,
            hit_quota: 5,
            reward_hit: 5.0,
            reward_outside: -1.0,
            gamma: 0.9,
            noise_sd_mm: 1.73,
            depth_noise_sd_mm: 1.0,
            action_range: 15.0,
            window: PlaneWindow::default(),
            probe: ProbeModel::default(),
            core_length_mm: 20.0,
            sample_step_mm: crate::geometry::DEFAULT_STEP_MM,
        }
    }
}

impl EnvConfig {
    pub fn noiseless() -> Self {
        Self {
            noise_sd_mm: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.max_steps < 1 {
            return bad("max_steps must be >= 1");
        }
        if self.hit_quota < 1 {
            return bad("hit_quota must be >= 1");
        }
        if !(self.noise_sd_mm >= 0.0 && self.depth_noise_sd_mm >= 0.0) {
            return bad("noise SDs must be >= 0");
        }
        if !(self.action_range > 0.0) {
            return bad("action_range must be positive");
        }
        if !(self.core_length_mm > 0.0 && self.sample_step_mm > 0.0) {
            return bad("core length and sample step must be positive");
        }
        if self.window.res == 0 || !(self.window.depth_mm > 0.0 && self.window.height_mm > 0.0) {
            return bad("imaging window must be non-empty");
        }
        Ok(())
    }
}

/// The MDP state handed to a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub plane: PlaneImage,
    /// `(i / 12, j / 12)`.
    pub grid_pos: [f64; 2],
    pub hole: Hole,
}

impl Observation {
    pub fn new(plane: PlaneImage, hole: Hole) -> Self {
        let max = (GRID_SIZE - 1) as f64;
        Self {
            plane,
            grid_pos: [hole.i as f64 / max, hole.j as f64 / max],
            hole,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    HitQuota,
    StepCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleRecord {
    pub hole: Hole,
    pub world_mm: [f64; 2],
    pub core: CoreSegment,
    pub hit: bool,
    pub ccl_mm: f64,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub hit: bool,
    pub outside_prostate: bool,
    pub ccl_mm: f64,
    pub dist_mm: f64,
    pub needle: NeedleRecord,
    pub termination_reason: Option<TerminationReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
}

/// One logged transition (the observation is not retained).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action: [f64; 2],
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub case_id: String,
    pub seed: u64,
    pub start: Hole,
    pub noise_mm: Point3,
    pub steps: Vec<StepRecord>,
    pub total_reward: f64,
}

impl EpisodeLog {
    pub fn needles(&self) -> impl Iterator<Item = &NeedleRecord> + '_ {
        self.steps.iter().map(|s| &s.info.needle)
    }

    pub fn hits(&self) -> usize {
        self.steps.iter().filter(|s| s.info.hit).count()
    }
}

/// Reward for one fired needle. Precedence: hit, then outside, then the sign
/// of the distance improvement.
pub fn reward(cfg: &EnvConfig, hit: bool, outside: bool, dist_prev: f64, dist_now: f64) -> f64 {
    if hit {
        cfg.reward_hit
    } else if outside {
        cfg.reward_outside
    } else {
        sgn(dist_prev - dist_now)
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Depth (mm) at which to center a core: mean depth of visible lesion
/// pixels, else of prostate pixels, else the middle of the window.
pub fn fire_depth(plane: &PlaneImage, window: &PlaneWindow) -> f64 {
    for channel in [&plane.lesion, &plane.prostate] {
        let (mut sum, mut n) = (0.0, 0usize);
        for (k, p) in channel.iter().enumerate() {
            if *p != 0 {
                sum += window.u_of(k % plane.res);
                n += 1;
            }
        }
        if n > 0 {
            return sum / n as f64;
        }
    }
    window.depth_mm / 2.0
}

#[derive(Debug)]
struct Episode {
    rng: ChaCha8Rng,
    observed: Arc<LabelVolume>,
    pos: Hole,
    hits: usize,
    steps: usize,
    prev_dist: f64,
    done: bool,
    log: EpisodeLog,
}

/// One episode stream over a single case. Not for concurrent stepping; make
/// one instance per worker.
#[derive(Debug)]
pub struct BiopsyEnv {
    case_id: String,
    truth: Arc<LabelVolume>,
    lesion_voxels: Vec<[usize; 3]>,
    cfg: EnvConfig,
    centroid: Point3,
    episode: Option<Episode>,
}

impl BiopsyEnv {
    pub fn new(case_id: impl Into<String>, truth: Arc<LabelVolume>, cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let centroid = truth.lesion_centroid().map_err(|_| EnvError::NoTarget)?;
        Ok(Self {
            case_id: case_id.into(),
            lesion_voxels: truth.iter_label(Label::Lesion).collect(),
            truth,
            cfg,
            centroid,
            episode: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn truth(&self) -> &LabelVolume {
        &self.truth
    }

    pub fn true_centroid(&self) -> Point3 {
        self.centroid
    }

    /// Start a new episode: uniform random start hole and a fresh lesion
    /// localisation offset, both drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Hole::new(
            rng.random_range(0..GRID_SIZE as i64),
            rng.random_range(0..GRID_SIZE as i64),
        )
        .expect("sampled in range");
        let noise: Point3 = std::array::from_fn(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * self.cfg.noise_sd_mm
        });
        let observed = if self.truth.voxel_shift(noise) == [0, 0, 0] {
            Arc::clone(&self.truth)
        } else {
            Arc::new(self.truth.translate_members(Label::Lesion, &self.lesion_voxels, noise))
        };
        let prev_dist = self.dist_to_target(start);
        self.episode = Some(Episode {
            rng,
            observed,
            pos: start,
            hits: 0,
            steps: 0,
            prev_dist,
            done: false,
            log: EpisodeLog {
                case_id: self.case_id.clone(),
                seed,
                start,
                noise_mm: noise,
                steps: Vec::new(),
                total_reward: 0.0,
            },
        });
        self.observe_at(start)
    }

    fn episode(&self) -> Result<&Episode, EnvError> {
        self.episode.as_ref().ok_or(EnvError::NotReset)
    }

    pub fn position(&self) -> Result<Hole, EnvError> {
        Ok(self.episode()?.pos)
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_none_or(|e| e.done)
    }

    pub fn log(&self) -> Result<&EpisodeLog, EnvError> {
        Ok(&self.episode()?.log)
    }

    /// The current episode's observed (noisy) volume.
    pub fn observed(&self) -> Result<&LabelVolume, EnvError> {
        Ok(&self.episode()?.observed)
    }

    /// Observation with the probe rotated to `hole`, without firing.
    pub fn observe_at(&self, hole: Hole) -> Result<Observation, EnvError> {
        let ep = self.episode()?;
        let theta = self.cfg.probe.plane_angle(hole);
        Ok(Observation::new(
            resample_plane(&ep.observed, theta, &self.cfg.probe, &self.cfg.window),
            hole,
        ))
    }

    /// Distance from the true lesion centroid to the needle line of `hole`.
    pub fn dist_to_target(&self, hole: Hole) -> f64 {
        point_line_distance(self.centroid, &hole.needle_line())
    }

    /// Score a core at `hole` centered at `depth_mm` against the true lesion.
    pub fn evaluate_needle(&self, hole: Hole, depth_mm: f64) -> (CoreSegment, f64) {
        let core = CoreSegment {
            hole,
            center_depth_mm: depth_mm,
            length_mm: self.cfg.core_length_mm,
        };
        let ccl = segment_mask_length(&self.truth, Label::Lesion, &core, self.cfg.sample_step_mm);
        (core, ccl)
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult, EnvError> {
        let ep = self.episode()?;
        if ep.done {
            return Err(EnvError::EpisodeFinished);
        }
        let r = self.cfg.action_range;
        let delta = action.map(|a| if a.is_nan() { 0.0 } else { a.clamp(-r, r) });
        let target = Hole::clamped(
            (ep.pos.i as f64 + delta[0]).round() as i64,
            (ep.pos.j as f64 + delta[1]).round() as i64,
        );
        let observation = self.observe_at(target)?;
        let ep = self.episode.as_mut().expect("checked above");
        let z: f64 = ep.rng.sample(StandardNormal);
        let depth = fire_depth(&observation.plane, &self.cfg.window) + z * self.cfg.depth_noise_sd_mm;

        let core = CoreSegment {
            hole: target,
            center_depth_mm: depth,
            length_mm: self.cfg.core_length_mm,
        };
        let ccl_mm = segment_mask_length(&self.truth, Label::Lesion, &core, self.cfg.sample_step_mm);
        let hit = ccl_mm > 0.0;
        let outside = !line_intersects_mask(&self.truth, Label::Prostate, &target.needle_line());
        let dist_now = point_line_distance(self.centroid, &target.needle_line());
        let reward = reward(&self.cfg, hit, outside, ep.prev_dist, dist_now);

        let t = ep.steps;
        ep.steps += 1;
        ep.hits += hit as usize;
        ep.pos = target;
        ep.prev_dist = dist_now;
        let termination_reason = if ep.hits >= self.cfg.hit_quota {
            Some(TerminationReason::HitQuota)
        } else if ep.steps >= self.cfg.max_steps {
            Some(TerminationReason::StepCap)
        } else {
            None
        };
        let terminated = termination_reason.is_some();
        ep.done = terminated;

        let info = StepInfo {
            hit,
            outside_prostate: outside,
            ccl_mm,
            dist_mm: dist_now,
            needle: NeedleRecord {
                hole: target,
                world_mm: target.world().into(),
                core,
                hit,
                ccl_mm,
                step: t,
            },
            termination_reason,
        };
        ep.log.total_reward += reward;
        ep.log.steps.push(StepRecord {
            t,
            action,
            reward,
            terminated,
            info: info.clone(),
        });
        Ok(StepResult {
            observation,
            reward,
            terminated,
            info,
        })
    }

    /// Move to an absolute hole and fire.
    pub fn step_to(&mut self, hole: Hole) -> Result<StepResult, EnvError> {
        let pos = self.position()?;
        self.step([hole.i as f64 - pos.i as f64, hole.j as f64 - pos.j as f64])
    }
}
