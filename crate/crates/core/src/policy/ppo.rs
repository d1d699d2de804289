//! Returns, advantages and the clipped-surrogate update.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_grad_norm, Adam};
use super::network::{gaussian_entropy, gaussian_log_prob, OutputGrad, PolicyParams, SparseInput};
use super::train::TrainConfig;
use super::PolicyError;

/// Ratios above this abort the update.
pub const RATIO_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub input: SparseInput,
    /// Pre-clip action sample.
    pub action: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// `G_t = R_t + γ G_{t+1}` over one terminated episode.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Generalized advantage estimates for one terminated episode (bootstrap 0).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// Zero mean, unit variance; constant input maps to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// A rollout with per-step advantages and return targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    /// Splits on `done`; a trailing unterminated segment is treated as
    /// terminated.
    pub fn new(transitions: Vec<Transition>, gamma: f64, lambda: f64) -> Self {
        let mut advantages = Vec::with_capacity(transitions.len());
        let mut returns = Vec::with_capacity(transitions.len());
        let mut start = 0;
        for end in 0..transitions.len() {
            if transitions[end].done || end + 1 == transitions.len() {
                let ep = &transitions[start..=end];
                let r: Vec<f64> = ep.iter().map(|t| t.reward).collect();
                let v: Vec<f64> = ep.iter().map(|t| t.value).collect();
                let a = gae(&r, &v, gamma, lambda);
                returns.extend(a.iter().zip(&v).map(|(a, v)| a + v));
                advantages.extend(a);
                start = end + 1;
            }
        }
        Self {
            advantages: normalize(&advantages),
            returns,
            transitions,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    /// Total minimized objective.
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
}

/// Loss coefficients used by [`minibatch_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefs {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl From<&TrainConfig> for LossCoefs {
    fn from(c: &TrainConfig) -> Self {
        Self {
            clip_eps: c.clip_eps,
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
        }
    }
}

/// Mean PPO loss over `idx`:
/// `-surrogate + c_v (V - G)^2 - c_e H`. When `grad` is given, its gradient
/// is accumulated into it.
pub fn minibatch_loss(
    params: &PolicyParams,
    batch: &Batch,
    idx: &[usize],
    coefs: LossCoefs,
    mut grad: Option<&mut [f64]>,
) -> Result<LossStats, PolicyError> {
    let n = idx.len() as f64;
    let log_std = params.log_std();
    let sigma = log_std.map(f64::exp);
    let entropy = gaussian_entropy(log_std);
    let mut s = LossStats {
        entropy,
        ..Default::default()
    };
    for &k in idx {
        let tr = &batch.transitions[k];
        let adv = batch.advantages[k];
        let ret = batch.returns[k];
        let cache = params.forward_cached(&tr.input)?;
        let out = &cache.out;
        let logp = gaussian_log_prob(tr.action, out.mu, log_std);
        let ratio = (logp - tr.log_prob).exp();
        s.mean_ratio += ratio / n;
        s.max_ratio = s.max_ratio.max(ratio);
        s.approx_kl += (tr.log_prob - logp) / n;
        let clipped = ratio.clamp(1.0 - coefs.clip_eps, 1.0 + coefs.clip_eps);
        if clipped != ratio {
            s.clip_frac += 1.0 / n;
        }
        let surr = clipped_surrogate(ratio, adv, coefs.clip_eps);
        let verr = out.value - ret;
        s.policy_loss -= surr / n;
        s.value_loss += verr * verr / n;

        if let Some(g) = grad.as_deref_mut() {
            // d surr / d ratio is A on the unclipped branch and 0 otherwise
            let dsurr = if ratio * adv <= clipped * adv { adv } else { 0.0 };
            let coeff = -dsurr * ratio / n;
            let mut og = OutputGrad {
                value: coefs.value_coef * 2.0 * verr / n,
                ..Default::default()
            };
            for a in 0..2 {
                let z = (tr.action[a] - out.mu[a]) / sigma[a];
                og.mu[a] = coeff * z / sigma[a];
                og.log_std[a] = coeff * (z * z - 1.0);
            }
            params.backward(&tr.input, &cache, &og, g);
        }
    }
    if let Some(g) = grad {
        let l = params.layout().log_std.clone();
        for v in &mut g[l] {
            *v -= coefs.entropy_coef;
        }
    }
    s.loss = s.policy_loss + coefs.value_coef * s.value_loss - coefs.entropy_coef * entropy;
    if !s.loss.is_finite() {
        return Err(PolicyError::NonFinite(format!("loss = {}", s.loss)));
    }
    Ok(s)
}

/// The piece of the piecewise-smooth loss that `params` sit on: every ReLU
/// mask and whether each sample takes the unclipped surrogate branch.
pub fn loss_regime(
    params: &PolicyParams,
    batch: &Batch,
    idx: &[usize],
    clip_eps: f64,
) -> Result<Vec<bool>, PolicyError> {
    let log_std = params.log_std();
    let mut sig = Vec::new();
    for &k in idx {
        let tr = &batch.transitions[k];
        let cache = params.forward_cached(&tr.input)?;
        sig.extend(cache.relu_mask());
        let ratio = (gaussian_log_prob(tr.action, cache.out.mu, log_std) - tr.log_prob).exp();
        let adv = batch.advantages[k];
        sig.push(ratio * adv <= ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv);
    }
    Ok(sig)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean ratio over the first minibatch, before any parameter change.
    pub initial_mean_ratio: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Several epochs of shuffled minibatch Adam steps on the clipped objective.
///
/// A ratio above [`RATIO_LIMIT`] or a non-finite loss restores the parameters
/// and optimizer state from before the call and returns an error.
pub fn ppo_update(
    params: &mut PolicyParams,
    opt: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats, PolicyError> {
    if batch.is_empty() {
        return Ok(UpdateStats::default());
    }
    let snapshot = (params.data.clone(), opt.clone());
    let result = run_epochs(params, opt, batch, cfg, rng);
    if result.is_err() {
        params.data = snapshot.0;
        *opt = snapshot.1;
    }
    result
}

fn run_epochs(
    params: &mut PolicyParams,
    opt: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats, PolicyError> {
    let coefs = LossCoefs::from(cfg);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let mut stats = UpdateStats::default();
    let mb = cfg.minibatch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let s = minibatch_loss(params, batch, chunk, coefs, Some(&mut grad))?;
            if s.max_ratio > RATIO_LIMIT {
                return Err(PolicyError::RatioExplosion {
                    ratio: s.max_ratio,
                    limit: RATIO_LIMIT,
                });
            }
            if epoch == 0 && stats.minibatches == 0 {
                stats.initial_mean_ratio = s.mean_ratio;
            }
            let norm = match cfg.max_grad_norm {
                Some(max) => clip_grad_norm(&mut grad, max),
                None => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            };
            opt.step(&mut params.data, &grad);
            params.clamp_log_std();
            if !params.all_finite() {
                return Err(PolicyError::NonFinite("parameters after optimizer step".into()));
            }
            stats.minibatches += 1;
            let w = 1.0 / stats.minibatches as f64;
            let avg = |acc: &mut f64, x: f64| *acc += (x - *acc) * w;
            avg(&mut stats.policy_loss, s.policy_loss);
            avg(&mut stats.value_loss, s.value_loss);
            avg(&mut stats.entropy, s.entropy);
            avg(&mut stats.approx_kl, s.approx_kl);
            avg(&mut stats.clip_frac, s.clip_frac);
            avg(&mut stats.grad_norm, norm);
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::network::{sample_action, NetShape};
    use crate::policy::AdamConfig;
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn returns_examples() {
        let g = discounted_returns(&[0.0, 0.0, 5.0], 0.9);
        assert!((g[0] - 4.05).abs() < 1e-12 && (g[1] - 4.5).abs() < 1e-12 && g[2] == 5.0);
        assert_eq!(discounted_returns(&[1.0, 1.0], 1.0), vec![2.0, 1.0]);
        assert_eq!(discounted_returns(&[5.0], 0.9), vec![5.0]);
    }

    #[test]
    fn surrogate_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert_eq!(clipped_surrogate(0.5, 1.0, 0.2), 0.5);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..5.0)).collect();
            let v: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (gamma, lambda) = (0.9, 0.95);
            let delta: Vec<f64> = (0..10)
                .map(|t| r[t] + gamma * if t < 9 { v[t + 1] } else { 0.0 } - v[t])
                .collect();
            let got = gae(&r, &v, gamma, lambda);
            for t in 0..10 {
                let want: f64 = (t..10).map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k]).sum();
                assert!((got[t] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalize_stats() {
        let z = normalize(&[1.0, 2.0, 3.0, 10.0]);
        let m = z.iter().sum::<f64>() / 4.0;
        let var = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert_eq!(normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn batch_splits_episodes() {
        let mk = |reward: f64, done: bool| Transition {
            input: SparseInput::default(),
            action: [0.0; 2],
            log_prob: 0.0,
            value: 0.0,
            reward,
            done,
        };
        let b = Batch::new(vec![mk(1.0, false), mk(1.0, true), mk(5.0, true)], 1.0, 1.0);
        assert_eq!(b.returns, vec![2.0, 1.0, 5.0]);
    }

    proptest! {
        #[test]
        fn gae_reductions(
            data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            gamma in 0.1f64..1.0,
        ) {
            let r: Vec<f64> = data.iter().map(|d| d.0).collect();
            let v: Vec<f64> = data.iter().map(|d| d.1).collect();
            let zeros = vec![0.0; r.len()];
            prop_assert_eq!(gae(&r, &zeros, gamma, 1.0), discounted_returns(&r, gamma));
            let td = gae(&r, &v, gamma, 0.0);
            for t in 0..r.len() {
                let next = if t + 1 < r.len() { v[t + 1] } else { 0.0 };
                prop_assert_eq!(td[t], r[t] + gamma * next - v[t]);
            }
        }

        #[test]
        fn returns_recursion(r in prop::collection::vec(-5.0f64..5.0, 1..20), gamma in 0.0f64..=1.0) {
            let g = discounted_returns(&r, gamma);
            for t in 0..r.len() {
                let next = if t + 1 < r.len() { g[t + 1] } else { 0.0 };
                prop_assert_eq!(g[t], r[t] + gamma * next);
            }
        }
    }

    fn toy_batch(params: &PolicyParams, seed: u64, n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = params.shape.input as u32;
        let ts = (0..n)
            .map(|k| {
                let binary: Vec<u32> = (0..input_dim - 2).filter(|_| rng.random_bool(0.3)).collect();
                let input = SparseInput {
                    binary,
                    dense: vec![(input_dim - 2, rng.random()), (input_dim - 1, rng.random())],
                };
                let out = params.forward(&input).unwrap();
                let (_, raw, lp) = sample_action(out.mu, out.log_std, 15.0, &mut rng);
                Transition {
                    input,
                    action: raw,
                    log_prob: lp,
                    value: out.value,
                    reward: raw[0] / 5.0,
                    done: k % 5 == 4,
                }
            })
            .collect();
        Batch::new(ts, 0.9, 0.95)
    }

    #[test]
    fn fresh_batch_ratio_is_one() {
        let shape = NetShape {
            input: 20,
            hidden1: 16,
            hidden2: 16,
        };
        let mut p = PolicyParams::init(shape, 15.0, 0.0, 1);
        let b = toy_batch(&p, 2, 40);
        let cfg = TrainConfig {
            minibatch: 8,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(p.len(), AdamConfig::default());
        let s = ppo_update(&mut p, &mut opt, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((s.initial_mean_ratio - 1.0).abs() < 1e-6);
        assert_eq!(s.minibatches, 4 * 5);
    }

    #[test]
    fn update_improves_surrogate() {
        let shape = NetShape {
            input: 20,
            hidden1: 16,
            hidden2: 16,
        };
        let mut p = PolicyParams::init(shape, 15.0, 0.0, 4);
        let b = toy_batch(&p, 5, 64);
        let cfg = TrainConfig {
            minibatch: 16,
            ..TrainConfig::default()
        };
        let all: Vec<usize> = (0..b.len()).collect();
        let before = minibatch_loss(&p, &b, &all, (&cfg).into(), None).unwrap();
        let mut opt = Adam::new(
            p.len(),
            AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
        );
        ppo_update(&mut p, &mut opt, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let after = minibatch_loss(&p, &b, &all, (&cfg).into(), None).unwrap();
        assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
    }

    #[test]
    fn exploding_ratio_aborts_and_restores() {
        let shape = NetShape {
            input: 20,
            hidden1: 16,
            hidden2: 16,
        };
        let mut p = PolicyParams::init(shape, 15.0, 0.0, 7);
        let mut b = toy_batch(&p, 8, 16);
        b.transitions[3].log_prob -= 20.0;
        let before = p.clone();
        let mut opt = Adam::new(p.len(), AdamConfig::default());
        let err = ppo_update(
            &mut p,
            &mut opt,
            &b,
            &TrainConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert!(matches!(err, Err(PolicyError::RatioExplosion { .. })));
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 0);
    }
}
