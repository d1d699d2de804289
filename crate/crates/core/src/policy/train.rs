//! Collect/update loop with periodic deterministic evaluation and best-model
//! selection.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use super::adam::{Adam, AdamConfig};
use super::agent::{policy_episode, EpisodeError, PolicyAgent};
use super::network::{NetShape, PolicyParams};
use super::ppo::{discounted_returns, ppo_update, Batch, Transition, UpdateStats};
use super::PolicyError;
use crate::env::{BiopsyEnv, EnvError};
use crate::metrics::{EpisodeMetrics, NeedleSelection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub adam: AdamConfig,
    /// Minimum steps per rollout; rollouts always end on episode boundaries.
    pub rollout_steps: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: Option<f64>,
    pub total_episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub init_log_std: f64,
    /// Input value of an active plane pixel.
    pub binary_input_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            adam: AdamConfig::default(),
            rollout_steps: 2048,
            minibatch: 256,
            epochs: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: Some(0.5),
            total_episodes: 120_000,
            eval_every: 500,
            eval_episodes: 10,
            hidden1: 128,
            hidden2: 128,
            init_log_std: 1.0,
            binary_input_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.adam.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.minibatch == 0 || self.epochs == 0 || self.rollout_steps == 0 {
            return bad("rollout, minibatch and epochs must be nonzero");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be nonzero");
        }
        if !(self.binary_input_scale.is_finite() && self.binary_input_scale > 0.0) {
            return bad("binary_input_scale must be positive");
        }
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return bad("hidden layers must be nonempty");
        }
        Ok(())
    }

    /// SHA-256 of the JSON serialization, hex encoded.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Training episodes completed when the evaluation ran.
    pub episode: usize,
    /// Mean undiscounted episode reward.
    pub eval_mean_reward: f64,
    /// Mean per-episode hit rate, percent.
    pub hr: f64,
    /// Mean discounted return from the first step; the selection key.
    pub eval_mean_return: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PolicyParams,
    pub best_point: CurvePoint,
    pub last: PolicyParams,
    pub curve: Vec<CurvePoint>,
    pub updates: Vec<UpdateStats>,
    pub episodes: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    /// Training produced a non-finite loss or output; `params` are the last
    /// finite parameters, kept for diagnosis.
    #[error("training diverged after {episode} episodes: {source}")]
    Diverged {
        episode: usize,
        source: PolicyError,
        params: Box<PolicyParams>,
    },
}

impl From<EpisodeError> for TrainError {
    fn from(e: EpisodeError) -> Self {
        match e {
            EpisodeError::Env(e) => TrainError::Env(e),
            EpisodeError::Policy(e) => TrainError::Policy(e),
        }
    }
}

const EPISODE_STREAM: u64 = 0x6570_6973_6f64_6573;
const ACTION_STREAM: u64 = 0x6163_7469_6f6e_7321;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6521;
const EVAL_STREAM: u64 = 0x6576_616c_7561_7465;

/// Seeds of the fixed evaluation episodes for a training seed.
pub fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM);
    (0..n).map(|_| rng.random()).collect()
}

/// Index of the first maximal `eval_mean_return`.
pub fn select_best(curve: &[CurvePoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, p) in curve.iter().enumerate() {
        if best.is_none_or(|b| p.eval_mean_return > curve[b].eval_mean_return) {
            best = Some(k);
        }
    }
    best
}

/// Deterministic-mean evaluation on fixed seeds, recorded at `episode`.
pub fn evaluate(
    params: &PolicyParams,
    env: &mut BiopsyEnv,
    seeds: &[u64],
    gamma: f64,
    episode: usize,
) -> Result<CurvePoint, EpisodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = seeds.len() as f64;
    let mut p = CurvePoint {
        episode,
        eval_mean_reward: 0.0,
        hr: 0.0,
        eval_mean_return: 0.0,
    };
    for &s in seeds {
        let log = policy_episode(params, env, s, true, &mut rng)?;
        let rewards: Vec<f64> = log.steps.iter().map(|st| st.reward).collect();
        p.eval_mean_reward += log.total_reward / n;
        p.eval_mean_return += discounted_returns(&rewards, gamma).first().copied().unwrap_or(0.0) / n;
        p.hr += EpisodeMetrics::from_log(&log, 0.0, NeedleSelection::All).hr_pct / n;
    }
    Ok(p)
}

/// Trains a policy on the environment produced by `make_env`.
///
/// Two environments are created: one for rollouts and one for evaluation.
/// The result is fully determined by `cfg`, `seed` and the environment.
pub fn train<F>(mut make_env: F, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome, TrainError>
where
    F: FnMut() -> Result<BiopsyEnv, EnvError>,
{
    cfg.validate()?;
    let mut env = make_env()?;
    let mut eval_env = make_env()?;
    let env_cfg = env.config().clone();
    let bound = env_cfg.action_range;
    let shape = NetShape {
        hidden1: cfg.hidden1,
        hidden2: cfg.hidden2,
        ..NetShape::for_observation(env_cfg.window.res)
    };
    let mut params = PolicyParams::init(shape, bound, cfg.init_log_std, seed).with_binary_scale(cfg.binary_input_scale);
    let mut opt = Adam::new(params.len(), cfg.adam);
    let mut episode_rng = ChaCha8Rng::seed_from_u64(seed ^ EPISODE_STREAM);
    let mut action_rng = ChaCha8Rng::seed_from_u64(seed ^ ACTION_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let seeds = eval_seeds(seed, cfg.eval_episodes);

    let mut curve = Vec::new();
    let mut updates = Vec::new();
    let mut episodes = 0usize;
    let mut next_eval = cfg.eval_every;

    curve.push(evaluate(&params, &mut eval_env, &seeds, cfg.gamma, 0)?);
    let mut best = (params.clone(), curve[0]);

    let diverged = |episode: usize, source: PolicyError, params: &PolicyParams| TrainError::Diverged {
        episode,
        source,
        params: Box::new(params.clone()),
    };

    while episodes < cfg.total_episodes {
        let mut transitions: Vec<Transition> = Vec::with_capacity(cfg.rollout_steps + env_cfg.max_steps);
        let mut rollout_reward = 0.0;
        let first = episodes;
        let agent = PolicyAgent {
            params: &params,
            deterministic: false,
        };
        while transitions.len() < cfg.rollout_steps && episodes < cfg.total_episodes {
            let mut obs = env.reset(episode_rng.random())?;
            while !env.is_done() {
                let d = match agent.decide(&obs, bound, &mut action_rng) {
                    Ok(d) => d,
                    Err(e) => return Err(diverged(episodes, e, &params)),
                };
                let res = env.step(d.action)?;
                rollout_reward += res.reward;
                transitions.push(Transition {
                    input: d.input,
                    action: d.raw,
                    log_prob: d.log_prob,
                    value: d.value,
                    reward: res.reward,
                    done: res.terminated,
                });
                obs = res.observation;
            }
            episodes += 1;
        }
        let batch = Batch::new(transitions, cfg.gamma, cfg.gae_lambda);
        match ppo_update(&mut params, &mut opt, &batch, cfg, &mut shuffle_rng) {
            Ok(s) => updates.push(s),
            Err(e @ PolicyError::RatioExplosion { .. }) => warn!(episodes, "{e}"),
            Err(e) => return Err(diverged(episodes, e, &params)),
        }
        let mean = rollout_reward / (episodes - first).max(1) as f64;
        if episodes >= next_eval || episodes >= cfg.total_episodes {
            while next_eval <= episodes {
                next_eval += cfg.eval_every;
            }
            let point = match evaluate(&params, &mut eval_env, &seeds, cfg.gamma, episodes) {
                Ok(v) => v,
                Err(EpisodeError::Policy(e)) => return Err(diverged(episodes, e, &params)),
                Err(e) => return Err(e.into()),
            };
            info!(
                episodes,
                train_reward = mean,
                eval_reward = point.eval_mean_reward,
                eval_return = point.eval_mean_return,
                eval_hr = point.hr,
                "evaluation"
            );
            if point.eval_mean_return > best.1.eval_mean_return {
                best = (params.clone(), point);
            }
            curve.push(point);
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_point: best.1,
        last: params,
        curve,
        updates,
        episodes,
    })
}

/// Reward curve as CSV: `episode,eval_mean_reward,hr,eval_mean_return`.
pub fn write_curve_csv(curve: &[CurvePoint], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "episode,eval_mean_reward,hr,eval_mean_return")?;
    for p in curve {
        writeln!(
            out,
            "{},{},{},{}",
            p.episode, p.eval_mean_reward, p.hr, p.eval_mean_return
        )?;
    }
    Ok(())
}
