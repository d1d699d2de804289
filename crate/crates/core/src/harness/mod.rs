//! Experiment harness: cases and cohorts, the cohort runner and its reports,
//! group comparisons, JSON-lines logs, the observation wire format, the
//! `bioptx/1` bridge and operator sessions.

pub mod bridge;
pub mod cases;
pub mod compare;
pub mod logs;
pub mod runner;
pub mod session;
pub mod wire;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use bridge::{
    drive_episode, follow_plan, serve, BridgeClient, BridgeSession, ClientError, Plan, Reply, Request, PROTOCOL,
};
pub use cases::{generate_cohort, write_cohort, Case, CaseStore, CohortSpec};
pub use compare::{compare, CompareReport, MetricComparison, MetricSamples, DEFAULT_ALPHA};
pub use logs::{parse_line, read_lines, write_lines, EpisodeLine, LogError, LOG_SCHEMA};
pub use runner::{
    run_cohort, CohortReport, CohortSource, ExperimentConfig, PerturbationGrid, RowSummary, StrategySpec,
    MAX_FAIL_FRACTION,
};
pub use session::{
    CreateSession, Role, SessionCreated, SessionError, SessionManager, Status, StepPayload, StepRequest,
};
pub use wire::{decode_wire_observation, WireError, WireObservation};

use crate::policy::CheckpointError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("case {case}: {reason}")]
    Case { case: String, reason: String },
    #[error("comparison failed: {0}")]
    Compare(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Log(#[from] LogError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
