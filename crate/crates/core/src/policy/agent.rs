use rand::Rng;

use super::network::{sample_action, PolicyParams, SparseInput};
use super::PolicyError;
use crate::env::{BiopsyEnv, EnvError, EpisodeLog, Observation};

/// A policy acting in the environment.
#[derive(Debug, Clone)]
pub struct PolicyAgent<'a> {
    pub params: &'a PolicyParams,
    pub deterministic: bool,
}

/// One decision, with what PPO needs to learn from it.
#[derive(Debug, Clone)]
pub struct Decision {
    pub input: SparseInput,
    pub action: [f64; 2],
    pub raw: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
}

impl PolicyAgent<'_> {
    pub fn decide(&self, obs: &Observation, bound: f64, rng: &mut impl Rng) -> Result<Decision, PolicyError> {
        let input = SparseInput::from_observation(obs);
        let out = self.params.forward(&input)?;
        let (action, raw, log_prob) = if self.deterministic {
            let a = out.mu.map(|m| m.clamp(-bound, bound));
            (a, out.mu, super::gaussian_log_prob(out.mu, out.mu, out.log_std))
        } else {
            sample_action(out.mu, out.log_std, bound, rng)
        };
        Ok(Decision {
            input,
            action,
            raw,
            log_prob,
            value: out.value,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Runs one episode with the policy and returns its log.
pub fn policy_episode(
    params: &PolicyParams,
    env: &mut BiopsyEnv,
    seed: u64,
    deterministic: bool,
    rng: &mut impl Rng,
) -> Result<EpisodeLog, EpisodeError> {
    let agent = PolicyAgent { params, deterministic };
    let bound = env.config().action_range;
    let mut obs = env.reset(seed)?;
    while !env.is_done() {
        let d = agent.decide(&obs, bound, rng)?;
        obs = env.step(d.action)?.observation;
    }
    Ok(env.log()?.clone())
}

/// Uniform random relative moves over the full action range.
pub fn random_episode(env: &mut BiopsyEnv, seed: u64, rng: &mut impl Rng) -> Result<EpisodeLog, EnvError> {
    let bound = env.config().action_range;
    env.reset(seed)?;
    while !env.is_done() {
        let a = [rng.random_range(-bound..=bound), rng.random_range(-bound..=bound)];
        env.step(a)?;
    }
    Ok(env.log()?.clone())
}
