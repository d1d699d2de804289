//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Analytic entries smaller than this are not compared.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Largest finite-difference magnitude seen when no entry was comparable.
    pub max_abs_numeric: f64,
    /// Coordinates skipped because the stencil crossed a kink.
    #[serde(default)]
    pub kinks: usize,
}

/// Probes up to `probes` random coordinates whose analytic gradient is at
/// least [`GRAD_FLOOR`]; if none qualify, probes random coordinates and
/// reports the largest numeric gradient instead.
pub fn grad_check(
    theta: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    probes: usize,
    h: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    grad_check_piecewise(theta, analytic, |x| (loss(x), ()), probes, h, rng)
}

/// Like [`grad_check`] for a piecewise-smooth loss that also reports which
/// piece it was evaluated on. A coordinate whose `theta ± h` stencil leaves
/// the piece of `theta` is counted in `kinks` and another one is drawn.
pub fn grad_check_piecewise<S: PartialEq>(
    theta: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> (f64, S),
    probes: usize,
    h: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len());
    let eligible: Vec<usize> = (0..theta.len()).filter(|&k| analytic[k].abs() >= GRAD_FLOOR).collect();
    let (_, piece) = loss(theta);
    let mut x = theta.to_vec();
    let mut numeric = |k: usize| {
        let orig = x[k];
        x[k] = orig + h;
        let (up, s_up) = loss(&x);
        x[k] = orig - h;
        let (down, s_down) = loss(&x);
        x[k] = orig;
        ((up - down) / (2.0 * h), s_up == piece && s_down == piece)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        max_abs_numeric: 0.0,
        kinks: 0,
    };
    if eligible.is_empty() {
        for k in sample(rng, theta.len(), probes.min(theta.len())) {
            report.max_abs_numeric = report.max_abs_numeric.max(numeric(k).0.abs());
        }
        return report;
    }
    let mut order: Vec<usize> = eligible;
    order.shuffle(rng);
    for k in order {
        if report.probes == probes {
            break;
        }
        let (num, smooth) = numeric(k);
        if !smooth {
            report.kinks += 1;
            continue;
        }
        let a = analytic[k];
        let rel = (a - num).abs() / a.abs().max(num.abs());
        report.max_rel_error = report.max_rel_error.max(rel);
        report.probes += 1;
    }
    report
}
