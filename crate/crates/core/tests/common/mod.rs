#![allow(dead_code)]

use std::sync::Arc;

use bioptx::anatomy::{generate_synthetic, AnatomySpec, Label, LabelVolume, LesionSize};
use bioptx::env::{BiopsyEnv, EnvConfig};
use bioptx::policy::{Batch, PolicyAgent, PolicyParams, Transition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn volume_with_lesion_cc(cc: f64) -> Arc<LabelVolume> {
    let spec = AnatomySpec {
        lesion_size: LesionSize::VolumeCc(cc),
        ..AnatomySpec::default()
    };
    Arc::new(generate_synthetic(&spec).unwrap())
}

/// Every prostate voxel also carries the lesion label.
pub fn whole_gland_lesion() -> Arc<LabelVolume> {
    let mut vol = generate_synthetic(&AnatomySpec::default()).unwrap();
    let voxels: Vec<[usize; 3]> = vol.iter_label(Label::Prostate).collect();
    for [x, y, z] in voxels {
        vol.set_label(x, y, z, Label::Lesion, true);
    }
    Arc::new(vol)
}

pub fn env(vol: &Arc<LabelVolume>, cfg: EnvConfig) -> BiopsyEnv {
    BiopsyEnv::new("case-000", vol.clone(), cfg).unwrap()
}

/// Stochastic rollout of at least `steps` transitions with `params`.
pub fn rollout(params: &PolicyParams, env: &mut BiopsyEnv, steps: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent = PolicyAgent {
        params,
        deterministic: false,
    };
    let bound = env.config().action_range;
    let mut ts = Vec::new();
    let mut ep = seed;
    while ts.len() < steps {
        let mut obs = env.reset(ep).unwrap();
        ep += 1;
        while !env.is_done() {
            let d = agent.decide(&obs, bound, &mut rng).unwrap();
            let res = env.step(d.action).unwrap();
            ts.push(Transition {
                input: d.input,
                action: d.raw,
                log_prob: d.log_prob,
                value: d.value,
                reward: res.reward,
                done: res.terminated,
            });
            obs = res.observation;
        }
    }
    Batch::new(ts, 0.9, 0.95)
}

/// Multiplicative jitter so the ratios in a fresh batch move away from 1.
pub fn perturbed(params: &PolicyParams, scale: f64, seed: u64) -> PolicyParams {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    for w in &mut p.data {
        *w *= 1.0 + scale * rng.random_range(-1.0..1.0);
    }
    p
}
