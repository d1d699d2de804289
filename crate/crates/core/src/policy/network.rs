//! Two-hidden-layer Gaussian policy with a value head and hand-derived
//! backpropagation.
//!
//! Parameters live in one flat `f64` vector so the optimizer, the checkpoint
//! writer and the gradient checker can treat them uniformly. The first layer
//! is stored input-major, so a binary input costs one row add per set pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::env::Observation;

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl NetShape {
    /// Two 64x64 binary channels plus the normalized grid position.
    pub fn for_observation(res: usize) -> Self {
        Self {
            input: 2 * res * res + 2,
            hidden1: 128,
            hidden2: 128,
        }
    }

    pub fn layout(&self) -> Layout {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let w1 = take(self.input * self.hidden1);
        let b1 = take(self.hidden1);
        let w2 = take(self.hidden2 * self.hidden1);
        let b2 = take(self.hidden2);
        let w_mu = take(ACTION_DIM * self.hidden2);
        let b_mu = take(ACTION_DIM);
        let w_v = take(self.hidden2);
        let b_v = take(1);
        let log_std = take(ACTION_DIM);
        Layout {
            w1,
            b1,
            w2,
            b2,
            w_mu,
            b_mu,
            w_v,
            b_v,
            log_std,
            len: off,
        }
    }
}

type Span = std::ops::Range<usize>;

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
    pub w_mu: Span,
    pub b_mu: Span,
    pub w_v: Span,
    pub b_v: Span,
    pub log_std: Span,
    pub len: usize,
}

impl Layout {
    /// `(name, shape, span)` for each tensor, in storage order.
    pub fn tensors(&self, shape: &NetShape) -> Vec<(&'static str, Vec<usize>, Span)> {
        vec![
            ("w1", vec![shape.input, shape.hidden1], self.w1.clone()),
            ("b1", vec![shape.hidden1], self.b1.clone()),
            ("w2", vec![shape.hidden2, shape.hidden1], self.w2.clone()),
            ("b2", vec![shape.hidden2], self.b2.clone()),
            ("w_mu", vec![ACTION_DIM, shape.hidden2], self.w_mu.clone()),
            ("b_mu", vec![ACTION_DIM], self.b_mu.clone()),
            ("w_v", vec![shape.hidden2], self.w_v.clone()),
            ("b_v", vec![1], self.b_v.clone()),
            ("log_std", vec![ACTION_DIM], self.log_std.clone()),
        ]
    }
}

/// A network input: indices of active binary inputs, plus explicit values.
///
/// Each active binary input takes the value [`PolicyParams::binary_scale`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseInput {
    pub binary: Vec<u32>,
    pub dense: Vec<(u32, f64)>,
}

impl SparseInput {
    pub fn from_observation(obs: &Observation) -> Self {
        let n = (2 * obs.plane.res * obs.plane.res) as u32;
        Self {
            binary: obs.plane.active_indices(),
            dense: vec![(n, obs.grid_pos[0]), (n + 1, obs.grid_pos[1])],
        }
    }

    pub fn from_dense(x: &[f64]) -> Self {
        Self {
            binary: Vec::new(),
            dense: x.iter().enumerate().map(|(k, v)| (k as u32, *v)).collect(),
        }
    }

    fn max_index(&self) -> Option<u32> {
        self.binary
            .iter()
            .copied()
            .chain(self.dense.iter().map(|(k, _)| *k))
            .max()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub shape: NetShape,
    /// Scale of the tanh-squashed action mean.
    pub action_scale: f64,
    /// Value taken by an active binary input.
    pub binary_scale: f64,
    pub data: Vec<f64>,
    layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mu: [f64; 2],
    pub log_std: [f64; 2],
    pub value: f64,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    tanh_z: [f64; 2],
    pub out: PolicyOutput,
}

impl ForwardCache {
    /// Which hidden units were active, first layer then second.
    pub fn relu_mask(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre1.iter().chain(&self.pre2).map(|z| *z > 0.0)
    }
}

/// Upstream gradients of a scalar loss with respect to the network outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputGrad {
    pub mu: [f64; 2],
    pub log_std: [f64; 2],
    pub value: f64,
}

impl PolicyParams {
    pub fn zeros(shape: NetShape, action_scale: f64) -> Self {
        let layout = shape.layout();
        Self {
            shape,
            action_scale,
            binary_scale: 1.0,
            data: vec![0.0; layout.len],
            layout,
        }
    }

    pub fn from_data(shape: NetShape, action_scale: f64, data: Vec<f64>) -> Result<Self, PolicyError> {
        let layout = shape.layout();
        if data.len() != layout.len {
            return Err(PolicyError::Shape(format!(
                "expected {} parameters, got {}",
                layout.len,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            action_scale,
            binary_scale: 1.0,
            data,
            layout,
        })
    }

    /// Scaled-uniform hidden layers, near-zero output heads.
    pub fn init(shape: NetShape, action_scale: f64, init_log_std: f64, seed: u64) -> Self {
        let mut p = Self::zeros(shape, action_scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = p.layout.clone();
        let mut fill = |span: Span, bound: f64, data: &mut [f64]| {
            for w in &mut data[span] {
                *w = rng.random_range(-bound..bound);
            }
        };
        // first-layer inputs are sparse binary; scale for a few hundred active
        fill(l.w1.clone(), (3.0 / 512.0f64).sqrt(), &mut p.data);
        fill(l.w2.clone(), (6.0 / shape.hidden1 as f64).sqrt(), &mut p.data);
        fill(l.w_mu.clone(), 0.01 / (shape.hidden2 as f64).sqrt(), &mut p.data);
        fill(l.w_v.clone(), 1.0 / (shape.hidden2 as f64).sqrt(), &mut p.data);
        for v in &mut p.data[l.log_std.clone()] {
            *v = init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        p
    }

    pub fn with_binary_scale(mut self, scale: f64) -> Self {
        self.binary_scale = scale;
        self
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|w| w.is_finite())
    }

    pub fn log_std(&self) -> [f64; 2] {
        let s = &self.data[self.layout.log_std.clone()];
        [s[0], s[1]]
    }

    pub fn clamp_log_std(&mut self) {
        for v in &mut self.data[self.layout.log_std.clone()] {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn forward(&self, x: &SparseInput) -> Result<PolicyOutput, PolicyError> {
        Ok(self.forward_cached(x)?.out)
    }

    pub fn forward_cached(&self, x: &SparseInput) -> Result<ForwardCache, PolicyError> {
        if let Some(k) = x.max_index() {
            if k as usize >= self.shape.input {
                return Err(PolicyError::Shape(format!("input index {k} >= {}", self.shape.input)));
            }
        }
        let NetShape {
            hidden1: n1,
            hidden2: n2,
            ..
        } = self.shape;
        let l = &self.layout;
        let d = &self.data;
        let w1 = &d[l.w1.clone()];

        let mut pre1 = d[l.b1.clone()].to_vec();
        let bs = self.binary_scale;
        for &k in &x.binary {
            let row = &w1[k as usize * n1..(k as usize + 1) * n1];
            for (a, w) in pre1.iter_mut().zip(row) {
                *a += bs * w;
            }
        }
        for &(k, v) in &x.dense {
            let row = &w1[k as usize * n1..(k as usize + 1) * n1];
            for (a, w) in pre1.iter_mut().zip(row) {
                *a += v * w;
            }
        }
        let h1: Vec<f64> = pre1.iter().map(|a| a.max(0.0)).collect();

        let w2 = &d[l.w2.clone()];
        let b2 = &d[l.b2.clone()];
        let pre2: Vec<f64> = (0..n2).map(|k| b2[k] + dot(&w2[k * n1..(k + 1) * n1], &h1)).collect();
        let h2: Vec<f64> = pre2.iter().map(|a| a.max(0.0)).collect();

        let w_mu = &d[l.w_mu.clone()];
        let b_mu = &d[l.b_mu.clone()];
        let mut tanh_z = [0.0; 2];
        let mut mu = [0.0; 2];
        for a in 0..ACTION_DIM {
            tanh_z[a] = (b_mu[a] + dot(&w_mu[a * n2..(a + 1) * n2], &h2)).tanh();
            mu[a] = self.action_scale * tanh_z[a];
        }
        let value = d[l.b_v.start] + dot(&d[l.w_v.clone()], &h2);
        let out = PolicyOutput {
            mu,
            log_std: self.log_std(),
            value,
        };
        if !(mu.iter().all(|m| m.is_finite()) && value.is_finite()) {
            return Err(PolicyError::NonFinite(
                "forward pass produced a non-finite output".into(),
            ));
        }
        Ok(ForwardCache {
            pre1,
            h1,
            pre2,
            h2,
            tanh_z,
            out,
        })
    }

    /// Accumulate parameter gradients for one sample into `grad`.
    pub fn backward(&self, x: &SparseInput, cache: &ForwardCache, g: &OutputGrad, grad: &mut [f64]) {
        let NetShape {
            hidden1: n1,
            hidden2: n2,
            ..
        } = self.shape;
        let l = &self.layout;
        let d = &self.data;

        let mut dz = [0.0; 2];
        for a in 0..ACTION_DIM {
            dz[a] = g.mu[a] * self.action_scale * (1.0 - cache.tanh_z[a] * cache.tanh_z[a]);
        }
        let w_mu = &d[l.w_mu.clone()];
        let w_v = &d[l.w_v.clone()];
        let mut dpre2 = vec![0.0; n2];
        for k in 0..n2 {
            grad[l.w_mu.start + k] += dz[0] * cache.h2[k];
            grad[l.w_mu.start + n2 + k] += dz[1] * cache.h2[k];
            grad[l.w_v.start + k] += g.value * cache.h2[k];
            if cache.pre2[k] > 0.0 {
                dpre2[k] = dz[0] * w_mu[k] + dz[1] * w_mu[n2 + k] + g.value * w_v[k];
            }
        }
        grad[l.b_mu.start] += dz[0];
        grad[l.b_mu.start + 1] += dz[1];
        grad[l.b_v.start] += g.value;
        grad[l.log_std.start] += g.log_std[0];
        grad[l.log_std.start + 1] += g.log_std[1];

        let w2 = &d[l.w2.clone()];
        let mut dh1 = vec![0.0; n1];
        for k in 0..n2 {
            let gk = dpre2[k];
            if gk == 0.0 {
                continue;
            }
            grad[l.b2.start + k] += gk;
            let row = l.w2.start + k * n1;
            for j in 0..n1 {
                grad[row + j] += gk * cache.h1[j];
            }
            for (acc, w) in dh1.iter_mut().zip(&w2[k * n1..(k + 1) * n1]) {
                *acc += gk * w;
            }
        }
        let dpre1: Vec<f64> = dh1
            .iter()
            .zip(&cache.pre1)
            .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
            .collect();
        for (acc, g) in grad[l.b1.clone()].iter_mut().zip(&dpre1) {
            *acc += g;
        }
        for &k in &x.binary {
            let row = l.w1.start + k as usize * n1;
            for (acc, g) in grad[row..row + n1].iter_mut().zip(&dpre1) {
                *acc += self.binary_scale * g;
            }
        }
        for &(k, v) in &x.dense {
            let row = l.w1.start + k as usize * n1;
            for (acc, g) in grad[row..row + n1].iter_mut().zip(&dpre1) {
                *acc += v * g;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(action: [f64; 2], mu: [f64; 2], log_std: [f64; 2]) -> f64 {
    (0..ACTION_DIM)
        .map(|a| {
            let z = (action[a] - mu[a]) * (-log_std[a]).exp();
            -0.5 * z * z - log_std[a] - 0.5 * LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: [f64; 2]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Draw an action; returns the clipped action and the log-probability of the
/// unclipped sample.
pub fn sample_action(mu: [f64; 2], log_std: [f64; 2], bound: f64, rng: &mut impl Rng) -> ([f64; 2], [f64; 2], f64) {
    let mut raw = [0.0; 2];
    for a in 0..ACTION_DIM {
        let z: f64 = rng.sample(StandardNormal);
        raw[a] = mu[a] + log_std[a].exp() * z;
    }
    let clipped = raw.map(|r| r.clamp(-bound, bound));
    (clipped, raw, gaussian_log_prob(raw, mu, log_std))
}
