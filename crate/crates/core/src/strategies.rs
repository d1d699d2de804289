//! Human-designed baseline strategies: left-to-right sweeping and candidate
//! scouting, each with an operator bias/SD perturbation on needle placement.
//!
//! Baselines see exactly what the agent sees: the noisy observed lesion, the
//! same start hole and the same episode seed.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anatomy::Label;
use crate::env::{BiopsyEnv, EnvError, EpisodeLog};
use crate::geometry::{line_intersects_mask, Hole, GRID_SIZE};

/// Both baselines stop after this many needles.
pub const MAX_BASELINE_NEEDLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasDirection {
    #[default]
    PlusX,
    /// A uniformly random direction drawn once per episode.
    RandomPerEpisode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub bias_mm: f64,
    pub sd_mm: f64,
    #[serde(default)]
    pub direction: BiasDirection,
}

impl Perturbation {
    pub fn new(bias_mm: f64, sd_mm: f64) -> Self {
        Self {
            bias_mm,
            sd_mm,
            direction: BiasDirection::PlusX,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    fn resolve_direction(&self, rng: &mut impl Rng) -> [f64; 2] {
        match self.direction {
            BiasDirection::PlusX => [1.0, 0.0],
            BiasDirection::RandomPerEpisode => {
                let a = rng.random_range(0.0..TAU);
                [a.cos(), a.sin()]
            }
        }
    }

    /// Raw placement offset in mm: bias along `dir` plus isotropic Gaussian
    /// scatter.
    pub fn offset(&self, dir: [f64; 2], rng: &mut impl Rng) -> [f64; 2] {
        let zx: f64 = rng.sample(StandardNormal);
        let zy: f64 = rng.sample(StandardNormal);
        [
            self.bias_mm * dir[0] + self.sd_mm * zx,
            self.bias_mm * dir[1] + self.sd_mm * zy,
        ]
    }
}

/// Perturb an intended template position and snap it to the nearest hole.
pub fn perturb_position(world: (f64, f64), p: &Perturbation, dir: [f64; 2], rng: &mut impl Rng) -> Hole {
    let [dx, dy] = p.offset(dir, rng);
    Hole::nearest(world.0 + dx, world.1 + dy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Sweep,
    Scout,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Sweep => "sweep",
            Baseline::Scout => "scout",
        }
    }

    pub fn run(self, env: &mut BiopsyEnv, seed: u64, p: &Perturbation) -> Result<EpisodeLog, EnvError> {
        match self {
            Baseline::Sweep => sweep_episode(env, seed, p),
            Baseline::Scout => scout_episode(env, seed, p),
        }
    }
}

/// Strategy RNG, independent of the environment's own stream.
fn strategy_rng(seed: u64, which: Baseline) -> ChaCha8Rng {
    let tag = match which {
        Baseline::Sweep => 0x5157_4545_5000_0001u64,
        Baseline::Scout => 0x5343_4f55_5400_0002u64,
    };
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

/// Sweep the probe across columns 0..=12 at the start row; whenever the
/// observed lesion appears in the plane, fire once at the hole nearest its
/// in-plane centroid (after perturbation).
pub fn sweep_episode(env: &mut BiopsyEnv, seed: u64, p: &Perturbation) -> Result<EpisodeLog, EnvError> {
    env.reset(seed)?;
    let mut rng = strategy_rng(seed, Baseline::Sweep);
    let dir = p.resolve_direction(&mut rng);
    let row = env.position()?.j;
    let probe = env.config().probe;
    let window = env.config().window;
    let mut fired = 0;
    for i in 0..GRID_SIZE as u8 {
        if fired >= MAX_BASELINE_NEEDLES || env.is_done() {
            break;
        }
        let plane_hole = Hole { i, j: row };
        let obs = env.observe_at(plane_hole)?;
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for (k, px) in obs.plane.lesion.iter().enumerate() {
            if *px != 0 {
                su += window.u_of(k % obs.plane.res);
                sv += window.v_of(k / obs.plane.res);
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let theta = probe.plane_angle(plane_hole);
        let c = probe.plane_point(theta, su / n as f64, sv / n as f64);
        let hole = perturb_position((c[0], c[1]), p, dir, &mut rng);
        env.step_to(hole)?;
        fired += 1;
    }
    Ok(env.log()?.clone())
}

/// Holes whose needle line passes through the observed lesion, in grid order.
pub fn scout_candidates(env: &BiopsyEnv) -> Result<Vec<Hole>, EnvError> {
    let observed = env.observed()?;
    Ok(Hole::all()
        .filter(|h| line_intersects_mask(observed, Label::Lesion, &h.needle_line()))
        .collect())
}

/// Enumerate candidates, then fire at up to five distinct ones chosen
/// uniformly at random (each perturbed).
pub fn scout_episode(env: &mut BiopsyEnv, seed: u64, p: &Perturbation) -> Result<EpisodeLog, EnvError> {
    env.reset(seed)?;
    let mut rng = strategy_rng(seed, Baseline::Scout);
    let dir = p.resolve_direction(&mut rng);
    let candidates = scout_candidates(env)?;
    let k = candidates.len().min(MAX_BASELINE_NEEDLES);
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), k);
    for idx in picks.iter() {
        if env.is_done() {
            break;
        }
        let hole = perturb_position(candidates[idx].world(), p, dir, &mut rng);
        env.step_to(hole)?;
    }
    Ok(env.log()?.clone())
}
