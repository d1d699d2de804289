//! JSON-lines episode logs.
//!
//! One line per episode. Cohort runs, bridged runs and operator sessions all
//! write the same record, so any of them can be fed back into the metrics.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EpisodeLog;
use crate::strategies::Perturbation;

pub const LOG_SCHEMA: &str = "bioptx.episode/1";
/// Longest line the parser will look at.
pub const MAX_LINE_BYTES: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeLine {
    pub schema: String,
    /// `agent`, `sweep`, `scout`, `remote` or `human`.
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Perturbation>,
    pub lesion_volume_cc: f64,
    pub log: EpisodeLog,
}

impl EpisodeLine {
    pub fn new(strategy: &str, perturbation: Option<Perturbation>, lesion_volume_cc: f64, log: EpisodeLog) -> Self {
        Self {
            schema: LOG_SCHEMA.into(),
            strategy: strategy.into(),
            perturbation,
            lesion_volume_cc,
            log,
        }
    }

    /// Canonical single-line JSON, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("episode line serializes")
    }

    /// Structural checks a well-formed log always passes.
    pub fn validate(&self) -> Result<(), String> {
        if self.schema != LOG_SCHEMA {
            return Err(format!("unknown schema {:?}", self.schema));
        }
        if !(self.lesion_volume_cc.is_finite() && self.lesion_volume_cc >= 0.0) {
            return Err("lesion_volume_cc must be finite and >= 0".into());
        }
        let steps = &self.log.steps;
        let mut total = 0.0;
        for (k, s) in steps.iter().enumerate() {
            if s.t != k || s.info.needle.step != k {
                return Err(format!("step {k} is numbered {}", s.t));
            }
            if s.terminated != (k + 1 == steps.len() && s.info.termination_reason.is_some()) {
                return Err(format!("step {k}: termination flag out of place"));
            }
            if s.info.hit != (s.info.ccl_mm > 0.0) || s.info.needle.hit != s.info.hit {
                return Err(format!("step {k}: hit flag disagrees with core length"));
            }
            if !s.reward.is_finite() || s.action.iter().any(|a| !a.is_finite()) {
                return Err(format!("step {k}: non-finite value"));
            }
            total += s.reward;
        }
        if (total - self.log.total_reward).abs() > 1e-9 * (1.0 + total.abs()) {
            return Err(format!(
                "total_reward {} does not match the step sum {total}",
                self.log.total_reward
            ));
        }
        Ok(())
    }
}

/// Parses and validates one log line from untrusted input.
pub fn parse_line(line: &str) -> Result<EpisodeLine, String> {
    if line.len() > MAX_LINE_BYTES {
        return Err("line too long".into());
    }
    let rec: EpisodeLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.validate()?;
    Ok(rec)
}

pub fn write_lines<'a>(out: &mut impl Write, lines: impl IntoIterator<Item = &'a EpisodeLine>) -> io::Result<()> {
    for l in lines {
        writeln!(out, "{}", l.to_line())?;
    }
    Ok(())
}

/// Reads every non-blank line; the first bad one aborts with its line number.
pub fn read_lines(input: impl BufRead) -> Result<Vec<EpisodeLine>, LogError> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line).map_err(|reason| LogError::Invalid { line: k + 1, reason })?);
    }
    Ok(out)
}
