//! Biopsy metrics: hit rate (HR), cancer core length (CCL) and needle area
//! (NA), cohort aggregation and significance tests.
//!
//! All metrics are computed from logged needles, which were scored against the
//! true lesion, never the observed one.

mod stats;

pub use stats::{ln_gamma, regularized_incomplete_beta, student_t_cdf, student_t_two_sided_p, two_sample_ttest, TTest};

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EpisodeLog, NeedleRecord};

/// Cores at or above this length conventionally indicate clinical significance.
pub const SIGNIFICANT_CCL_MM: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no needles fired")]
    NoNeedles,
    #[error("empty cohort")]
    EmptyCohort,
    #[error("need at least {needed} samples per group, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

/// Which fired needles count toward HR and NA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum NeedleSelection {
    #[default]
    All,
    /// Only the last `n` fired needles.
    LastN(usize),
}

impl NeedleSelection {
    pub fn select<'a>(&self, needles: &'a [NeedleRecord]) -> &'a [NeedleRecord] {
        match *self {
            NeedleSelection::All => needles,
            NeedleSelection::LastN(n) => &needles[needles.len().saturating_sub(n)..],
        }
    }
}

pub fn hit_rate(needles: &[NeedleRecord]) -> Result<f64, MetricsError> {
    if needles.is_empty() {
        return Err(MetricsError::NoNeedles);
    }
    let hits = needles.iter().filter(|n| n.hit).count();
    Ok(100.0 * hits as f64 / needles.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CclSummary {
    pub per_needle_mm: Vec<f64>,
    /// Mean over positive cores, 0 if none.
    pub episode_mm: f64,
    pub max_mm: f64,
    pub significant: bool,
}

pub fn ccl_summary(per_needle_mm: &[f64]) -> CclSummary {
    let positive: Vec<f64> = per_needle_mm.iter().copied().filter(|c| *c > 0.0).collect();
    let episode_mm = if positive.is_empty() {
        0.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    let max_mm = per_needle_mm.iter().copied().fold(0.0, f64::max);
    CclSummary {
        per_needle_mm: per_needle_mm.to_vec(),
        episode_mm,
        max_mm,
        significant: max_mm >= SIGNIFICANT_CCL_MM,
    }
}

/// `π · std_x · std_y` with population standard deviations of the template
/// positions. Fewer than two positions give 0.
pub fn needle_area(positions: &[(f64, f64)]) -> f64 {
    if positions.len() < 2 {
        return 0.0;
    }
    let n = positions.len() as f64;
    let (mx, my) = positions.iter().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / n, my / n);
    let vx = positions.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>() / n;
    let vy = positions.iter().map(|(_, y)| (y - my).powi(2)).sum::<f64>() / n;
    PI * vx.sqrt() * vy.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// 0 when no needle was fired.
    pub hr_pct: f64,
    pub ccl: CclSummary,
    pub na_mm2: f64,
    pub needles_fired: usize,
    pub lesion_volume_cc: f64,
}

impl EpisodeMetrics {
    pub fn from_log(log: &EpisodeLog, lesion_volume_cc: f64, selection: NeedleSelection) -> Self {
        let needles: Vec<NeedleRecord> = log.needles().cloned().collect();
        Self::from_needles(&needles, lesion_volume_cc, selection)
    }

    pub fn from_needles(needles: &[NeedleRecord], lesion_volume_cc: f64, selection: NeedleSelection) -> Self {
        let chosen = selection.select(needles);
        let ccls: Vec<f64> = needles.iter().map(|n| n.ccl_mm).collect();
        let positions: Vec<(f64, f64)> = chosen.iter().map(|n| (n.world_mm[0], n.world_mm[1])).collect();
        Self {
            hr_pct: hit_rate(chosen).unwrap_or(0.0),
            ccl: ccl_summary(&ccls),
            na_mm2: needle_area(&positions),
            needles_fired: needles.len(),
            lesion_volume_cc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample SD; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, sd, n })
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub ccl_mm: MeanSd,
    pub hr_pct: MeanSd,
    pub na_mm2: MeanSd,
}

pub fn aggregate(cohort: &[EpisodeMetrics]) -> Result<CohortRow, MetricsError> {
    let col = |f: fn(&EpisodeMetrics) -> f64| -> Result<MeanSd, MetricsError> {
        MeanSd::of(&cohort.iter().map(f).collect::<Vec<_>>()).ok_or(MetricsError::EmptyCohort)
    };
    Ok(CohortRow {
        ccl_mm: col(|m| m.ccl.episode_mm)?,
        hr_pct: col(|m| m.hr_pct)?,
        na_mm2: col(|m| m.na_mm2)?,
    })
}
