//! Per-metric significance tests between two groups of episodes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::logs::EpisodeLine;
use super::HarnessError;
use crate::metrics::{two_sample_ttest, EpisodeMetrics, NeedleSelection};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Metric values of one group, one entry per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSamples {
    pub label: String,
    pub metrics: BTreeMap<String, Vec<f64>>,
}

impl MetricSamples {
    pub fn from_metrics(label: &str, ms: &[EpisodeMetrics]) -> Self {
        let col = |f: fn(&EpisodeMetrics) -> f64| ms.iter().map(f).collect::<Vec<_>>();
        let metrics = BTreeMap::from([
            ("ccl_mm".to_string(), col(|m| m.ccl.episode_mm)),
            ("hr_pct".to_string(), col(|m| m.hr_pct)),
            ("na_mm2".to_string(), col(|m| m.na_mm2)),
        ]);
        Self {
            label: label.into(),
            metrics,
        }
    }

    /// Samples recomputed from logged episodes.
    pub fn from_lines(label: &str, lines: &[EpisodeLine], selection: NeedleSelection) -> Self {
        let ms: Vec<EpisodeMetrics> = lines
            .iter()
            .map(|l| EpisodeMetrics::from_log(&l.log, l.lesion_volume_cc, selection))
            .collect();
        Self::from_metrics(label, &ms)
    }

    /// Reads a samples JSON file, or a JSON-lines episode log (`.jsonl`).
    pub fn load(path: &Path, selection: NeedleSelection) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
        if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            let lines = super::logs::read_lines(&bytes[..])?;
            return Ok(Self::from_lines(label, &lines, selection));
        }
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Absent when both groups have zero variance and different means.
    pub t: Option<f64>,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub a: String,
    pub b: String,
    pub alpha: f64,
    pub metrics: Vec<MetricComparison>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn compare(a: &MetricSamples, b: &MetricSamples, alpha: f64) -> Result<CompareReport, HarnessError> {
    if !a.metrics.keys().eq(b.metrics.keys()) {
        return Err(HarnessError::Compare(format!(
            "metric names differ: {:?} vs {:?}",
            a.metrics.keys().collect::<Vec<_>>(),
            b.metrics.keys().collect::<Vec<_>>()
        )));
    }
    let mut metrics = Vec::new();
    for (name, xa) in &a.metrics {
        let xb = &b.metrics[name];
        let t = two_sample_ttest(xa, xb).map_err(|e| HarnessError::Compare(format!("{name}: {e}")))?;
        metrics.push(MetricComparison {
            metric: name.clone(),
            n_a: xa.len(),
            n_b: xb.len(),
            mean_a: mean(xa),
            mean_b: mean(xb),
            t: t.t.is_finite().then_some(t.t),
            df: t.df,
            p: t.p,
            significant: t.significant(alpha),
        });
    }
    Ok(CompareReport {
        a: a.label.clone(),
        b: b.label.clone(),
        alpha,
        metrics,
    })
}
