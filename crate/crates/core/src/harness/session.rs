//! Operator sessions: one environment and one episode each.
//!
//! The HTTP service is a thin layer over [`SessionManager`]; everything a
//! client displays is computed here.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cases::CaseStore;
use super::logs::EpisodeLine;
use super::wire::WireObservation;
use crate::env::{BiopsyEnv, EnvConfig, EnvError, StepInfo, StepResult};
use crate::geometry::{Hole, GRID_SIZE};
use crate::metrics::{EpisodeMetrics, NeedleSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Human,
    Agent,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Human => "human",
            Role::Agent => "agent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Finished,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no session {0:?}")]
    NotFound(String),
    #[error("no case {0:?}")]
    UnknownCase(String),
    #[error("{0}")]
    Conflict(String),
    #[error("could not persist log: {0}")]
    Persist(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub case: String,
    pub seed: u64,
    #[serde(default)]
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub case: String,
    pub seed: u64,
    pub role: Role,
    pub obs: WireObservation,
    pub grid: [u8; 2],
    pub max_steps: usize,
    pub hit_quota: usize,
}

/// Relative move in whole holes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub di: i64,
    pub dj: i64,
}

/// One step as pushed to clients, with the running episode metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPayload {
    pub session: String,
    pub t: usize,
    pub obs: WireObservation,
    pub grid: [u8; 2],
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
    pub status: Status,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug)]
struct Session {
    id: String,
    role: Role,
    env: BiopsyEnv,
    lesion_volume_cc: f64,
}

impl Session {
    fn status(&self) -> Status {
        if self.env.is_done() {
            Status::Finished
        } else {
            Status::Active
        }
    }

    fn line(&self) -> Result<EpisodeLine, EnvError> {
        Ok(EpisodeLine::new(
            self.role.name(),
            None,
            self.lesion_volume_cc,
            self.env.log()?.clone(),
        ))
    }
}

/// Concurrent sessions; steps within one session are serialized.
#[derive(Debug)]
pub struct SessionManager {
    cases: Arc<CaseStore>,
    env_cfg: EnvConfig,
    log_dir: Option<PathBuf>,
    next_id: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionManager {
    /// Finished episodes are appended to `<log_dir>/<session id>.jsonl`.
    pub fn new(cases: Arc<CaseStore>, env_cfg: EnvConfig, log_dir: Option<PathBuf>) -> Self {
        Self {
            cases,
            env_cfg,
            log_dir,
            next_id: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn cases(&self) -> &CaseStore {
        &self.cases
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, SessionError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.into()))
    }

    pub fn create(&self, req: &CreateSession) -> Result<SessionCreated, SessionError> {
        let case = self
            .cases
            .get(&req.case)
            .ok_or_else(|| SessionError::UnknownCase(req.case.clone()))?;
        let mut env = BiopsyEnv::new(case.id.clone(), case.volume.clone(), self.env_cfg.clone())?;
        let obs = env.reset(req.seed)?;
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = Session {
            id: id.clone(),
            role: req.role,
            env,
            lesion_volume_cc: case.lesion_volume_cc,
        };
        self.sessions
            .lock()
            .expect("session map lock")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(SessionCreated {
            id,
            case: case.id.clone(),
            seed: req.seed,
            role: req.role,
            obs: WireObservation::encode(&obs),
            grid: [obs.hole.i, obs.hole.j],
            max_steps: self.env_cfg.max_steps,
            hit_quota: self.env_cfg.hit_quota,
        })
    }

    pub fn step(&self, id: &str, req: StepRequest) -> Result<StepPayload, SessionError> {
        let session = self.session(id)?;
        let mut s = session.lock().expect("session lock");
        if s.env.is_done() {
            return Err(SessionError::Conflict("episode already terminated".into()));
        }
        let range = self.env_cfg.action_range;
        if req.di.unsigned_abs() as f64 > range || req.dj.unsigned_abs() as f64 > range {
            return Err(SessionError::Conflict(format!(
                "move ({}, {}) exceeds the action range {range}",
                req.di, req.dj
            )));
        }
        let pos = s.env.position()?;
        let (ti, tj) = (pos.i as i64 + req.di, pos.j as i64 + req.dj);
        let max = GRID_SIZE as i64 - 1;
        if !(0..=max).contains(&ti) || !(0..=max).contains(&tj) {
            return Err(SessionError::Conflict(format!(
                "target hole ({ti}, {tj}) is off the template"
            )));
        }
        let res: StepResult = s.env.step_to(Hole {
            i: ti as u8,
            j: tj as u8,
        })?;
        let log = s.env.log()?;
        let metrics = EpisodeMetrics::from_log(log, s.lesion_volume_cc, NeedleSelection::All);
        let t = log.steps.len() - 1;
        if res.terminated {
            self.persist(&s)?;
        }
        Ok(StepPayload {
            session: s.id.clone(),
            t,
            obs: WireObservation::encode(&res.observation),
            grid: [res.observation.hole.i, res.observation.hole.j],
            reward: res.reward,
            terminated: res.terminated,
            info: res.info,
            status: s.status(),
            metrics,
        })
    }

    /// The episode so far, in the cohort log schema.
    pub fn log(&self, id: &str) -> Result<(EpisodeLine, Status), SessionError> {
        let session = self.session(id)?;
        let s = session.lock().expect("session lock");
        Ok((s.line()?, s.status()))
    }

    pub fn remove(&self, id: &str) -> Result<(), SessionError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| SessionError::NotFound(id.into()))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(&self, s: &Session) -> Result<(), SessionError> {
        let Some(dir) = &self.log_dir else {
            return Ok(());
        };
        let err = |e: std::io::Error| SessionError::Persist(e.to_string());
        std::fs::create_dir_all(dir).map_err(err)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{}.jsonl", s.id)))
            .map_err(err)?;
        writeln!(f, "{}", s.line()?.to_line()).map_err(err)
    }
}
