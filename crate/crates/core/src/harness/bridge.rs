//! `bioptx/1`: newline-delimited JSON that lets an external process drive the
//! environment.
//!
//! ```text
//! -> {"cmd":"handshake","protocol":"bioptx/1"}
//! <- {"ok":true,"protocol":"bioptx/1","cases":["case-000"]}
//! -> {"cmd":"reset","seed":7}                 optional "case"
//! <- {"ok":true,"obs":{..},"grid":[i,j]}
//! -> {"cmd":"step","action":[di,dj]}
//! <- {"ok":true,"obs":{..},"grid":[i,j],"reward":..,"terminated":..,"info":{..}}
//! -> {"cmd":"close"}
//! <- {"ok":true}
//! ```
//!
//! A terminating step also carries the complete episode `log`. Errors reply
//! `{"ok":false,"error":{"code":..,"message":..}}` and leave the session as it
//! was.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cases::CaseStore;
use super::wire::WireObservation;
use crate::env::{BiopsyEnv, EnvConfig, EnvError, EpisodeLog, Observation, StepInfo, StepRecord};

pub const PROTOCOL: &str = "bioptx/1";
/// Requests longer than this are answered with an error and skipped.
pub const MAX_REQUEST_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Handshake {
        protocol: String,
    },
    Reset {
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        case: Option<String>,
    },
    Step {
        action: [f64; 2],
    },
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyError {
    pub code: String,
    pub message: String,
}

/// Episodes a remote agent is asked to run, sent in the handshake reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub case: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs: Option<WireObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[u8; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<StepInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<EpisodeLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ReplyError>,
}

impl Reply {
    fn ok() -> Self {
        Self {
            ok: true,
            ..Default::default()
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(ReplyError {
                code: code.into(),
                message: message.into(),
            }),
            ..Default::default()
        }
    }

    fn with_obs(mut self, obs: &Observation) -> Self {
        self.obs = Some(WireObservation::encode(obs));
        self.grid = Some([obs.hole.i, obs.hole.j]);
        self
    }
}

fn env_error(e: EnvError) -> Reply {
    let code = match e {
        EnvError::EpisodeFinished => "episode_finished",
        EnvError::NotReset => "not_reset",
        EnvError::NoTarget => "no_target",
        EnvError::InvalidConfig(_) => "invalid_config",
    };
    Reply::error(code, e.to_string())
}

/// Server side of one bridge connection.
#[derive(Debug)]
pub struct BridgeSession {
    cases: Arc<CaseStore>,
    env_cfg: EnvConfig,
    plan: Option<Plan>,
    handshaken: bool,
    envs: BTreeMap<String, BiopsyEnv>,
    current: Option<String>,
    completed: Vec<EpisodeLog>,
}

impl BridgeSession {
    pub fn new(cases: Arc<CaseStore>, env_cfg: EnvConfig) -> Self {
        Self {
            cases,
            env_cfg,
            plan: None,
            handshaken: false,
            envs: BTreeMap::new(),
            current: None,
            completed: Vec::new(),
        }
    }

    /// A session that advertises `plan` and defaults resets to its case.
    pub fn with_plan(mut self, plan: Plan) -> Self {
        self.plan = Some(plan);
        self
    }

    /// Logs of every episode that ran to termination, in order.
    pub fn completed(&self) -> &[EpisodeLog] {
        &self.completed
    }

    pub fn into_completed(self) -> Vec<EpisodeLog> {
        self.completed
    }

    /// Handles one request line. The flag is true once the peer closed.
    pub fn handle_line(&mut self, line: &str) -> (Reply, bool) {
        if line.len() > MAX_REQUEST_BYTES {
            return (Reply::error("malformed", "request too long"), false);
        }
        match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(req),
            Err(e) => (Reply::error("malformed", e.to_string()), false),
        }
    }

    pub fn handle(&mut self, req: Request) -> (Reply, bool) {
        match req {
            Request::Handshake { protocol } => {
                if protocol != PROTOCOL {
                    return (
                        Reply::error(
                            "protocol",
                            format!("unsupported protocol {protocol:?}, expected {PROTOCOL:?}"),
                        ),
                        false,
                    );
                }
                self.handshaken = true;
                let mut r = Reply::ok();
                r.protocol = Some(PROTOCOL.into());
                r.cases = Some(self.cases.ids().map(String::from).collect());
                r.plan = self.plan.clone();
                (r, false)
            }
            _ if !self.handshaken => (Reply::error("handshake_required", "send a handshake first"), false),
            Request::Reset { seed, case } => (self.reset(seed, case), false),
            Request::Step { action } => (self.step(action), false),
            Request::Close => (Reply::ok(), true),
        }
    }

    fn reset(&mut self, seed: u64, case: Option<String>) -> Reply {
        let id = match case.or_else(|| self.plan.as_ref().map(|p| p.case.clone())) {
            Some(id) => id,
            None => match self.cases.ids().next() {
                Some(id) => id.to_string(),
                None => return Reply::error("unknown_case", "no cases loaded"),
            },
        };
        if !self.envs.contains_key(&id) {
            let Some(case) = self.cases.get(&id) else {
                return Reply::error("unknown_case", format!("no case {id:?}"));
            };
            match BiopsyEnv::new(id.clone(), case.volume.clone(), self.env_cfg.clone()) {
                Ok(env) => self.envs.insert(id.clone(), env),
                Err(e) => return env_error(e),
            };
        }
        let env = self.envs.get_mut(&id).expect("inserted above");
        match env.reset(seed) {
            Ok(obs) => {
                self.current = Some(id);
                Reply::ok().with_obs(&obs)
            }
            Err(e) => env_error(e),
        }
    }

    fn step(&mut self, action: [f64; 2]) -> Reply {
        if action.iter().any(|a| !a.is_finite()) {
            return Reply::error("invalid_action", "action must be finite");
        }
        let Some(env) = self.current.as_ref().and_then(|id| self.envs.get_mut(id)) else {
            return env_error(EnvError::NotReset);
        };
        match env.step(action) {
            Ok(res) => {
                let mut r = Reply::ok().with_obs(&res.observation);
                r.reward = Some(res.reward);
                r.terminated = Some(res.terminated);
                r.info = Some(res.info);
                if res.terminated {
                    let log = env.log().expect("episode is live").clone();
                    self.completed.push(log.clone());
                    r.log = Some(log);
                }
                r
            }
            Err(e) => env_error(e),
        }
    }
}

/// Answers requests from `input` until close or end of input.
pub fn serve(session: &mut BridgeSession, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, closed) = session.handle_line(&line);
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
        if closed {
            break;
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad reply: {0}")]
    BadReply(String),
    #[error("peer error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("connection closed")]
    Closed,
}

/// Result of a step as seen by the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStep {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
    pub log: Option<EpisodeLog>,
}

/// Client side of the protocol over any line transport.
pub struct BridgeClient<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> BridgeClient<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self { input, output }
    }

    pub fn request(&mut self, req: &Request) -> Result<Reply, ClientError> {
        serde_json::to_writer(&mut self.output, req).map_err(io::Error::from)?;
        self.output.write_all(b"\n")?;
        self.output.flush()?;
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            return Err(ClientError::Closed);
        }
        let reply: Reply = serde_json::from_str(&line).map_err(|e| ClientError::BadReply(e.to_string()))?;
        match reply.error {
            Some(ReplyError { code, message }) if !reply.ok => Err(ClientError::Remote { code, message }),
            _ => Ok(reply),
        }
    }

    pub fn handshake(&mut self) -> Result<Reply, ClientError> {
        self.request(&Request::Handshake {
            protocol: PROTOCOL.into(),
        })
    }

    pub fn reset(&mut self, seed: u64, case: Option<&str>) -> Result<Observation, ClientError> {
        let r = self.request(&Request::Reset {
            seed,
            case: case.map(String::from),
        })?;
        decode_obs(&r)
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<ClientStep, ClientError> {
        let r = self.request(&Request::Step { action })?;
        let observation = decode_obs(&r)?;
        let missing = |f: &str| ClientError::BadReply(format!("step reply without {f}"));
        Ok(ClientStep {
            observation,
            reward: r.reward.ok_or_else(|| missing("reward"))?,
            terminated: r.terminated.ok_or_else(|| missing("terminated"))?,
            info: r.info.ok_or_else(|| missing("info"))?,
            log: r.log,
        })
    }

    pub fn close(&mut self) -> Result<(), ClientError> {
        self.request(&Request::Close).map(|_| ())
    }
}

fn decode_obs(r: &Reply) -> Result<Observation, ClientError> {
    let w = r
        .obs
        .as_ref()
        .ok_or_else(|| ClientError::BadReply("reply without obs".into()))?;
    let obs = w.decode().map_err(|e| ClientError::BadReply(e.to_string()))?;
    if r.grid != Some(w.grid) {
        return Err(ClientError::BadReply("grid disagrees with obs".into()));
    }
    Ok(obs)
}

/// Runs one episode through `client` with `policy`, returning the log the
/// peer sent at termination. The streamed steps are checked against it.
pub fn drive_episode<R: BufRead, W: Write>(
    client: &mut BridgeClient<R, W>,
    seed: u64,
    case: Option<&str>,
    mut policy: impl FnMut(&Observation) -> [f64; 2],
) -> Result<EpisodeLog, ClientError> {
    let mut obs = client.reset(seed, case)?;
    let mut seen = Vec::new();
    loop {
        let action = policy(&obs);
        let s = client.step(action)?;
        seen.push(StepRecord {
            t: seen.len(),
            action,
            reward: s.reward,
            terminated: s.terminated,
            info: s.info,
        });
        obs = s.observation;
        if s.terminated {
            let log = s
                .log
                .ok_or_else(|| ClientError::BadReply("terminal step without log".into()))?;
            if log.steps != seen || log.seed != seed {
                return Err(ClientError::BadReply(
                    "episode log disagrees with streamed steps".into(),
                ));
            }
            return Ok(log);
        }
    }
}

/// Remote-agent side of a cohort run: handshake, run every planned seed on
/// the planned case, close.
pub fn follow_plan<R: BufRead, W: Write>(
    client: &mut BridgeClient<R, W>,
    mut policy: impl FnMut(&Observation) -> [f64; 2],
) -> Result<Vec<EpisodeLog>, ClientError> {
    let plan = client
        .handshake()?
        .plan
        .ok_or_else(|| ClientError::BadReply("handshake carried no plan".into()))?;
    let mut logs = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        logs.push(drive_episode(client, seed, Some(&plan.case), &mut policy)?);
    }
    client.close()?;
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{generate_synthetic, AnatomySpec};

    fn session() -> BridgeSession {
        let vol = generate_synthetic(&AnatomySpec::default()).unwrap();
        let store = CaseStore::from_volumes([("case-000".to_string(), vol)]);
        BridgeSession::new(Arc::new(store), EnvConfig::default())
    }

    fn code(r: &Reply) -> &str {
        &r.error.as_ref().unwrap().code
    }

    #[test]
    fn handshake_gates_everything() {
        let mut s = session();
        let (r, _) = s.handle_line(r#"{"cmd":"reset","seed":1}"#);
        assert_eq!(code(&r), "handshake_required");
        let (r, _) = s.handle_line(r#"{"cmd":"handshake","protocol":"bioptx/2"}"#);
        assert_eq!(code(&r), "protocol");
        let (r, _) = s.handle_line(r#"{"cmd":"handshake","protocol":"bioptx/1"}"#);
        assert!(r.ok);
        assert_eq!(r.protocol.as_deref(), Some(PROTOCOL));
        assert_eq!(r.cases, Some(vec!["case-000".to_string()]));
    }

    #[test]
    fn malformed_requests_keep_the_session() {
        let mut s = session();
        s.handle_line(r#"{"cmd":"handshake","protocol":"bioptx/1"}"#);
        let (r, _) = s.handle_line(r#"{"cmd":"reset","seed":7}"#);
        assert!(r.obs.is_some());
        let pos = r.grid.unwrap();
        for bad in [
            "not json",
            r#"{"cmd":"jump"}"#,
            r#"{"cmd":"step","action":[1]}"#,
            r#"{"cmd":"step","action":[0,0],"extra":1}"#,
            r#"{"cmd":"reset","seed":-1}"#,
        ] {
            let (r, closed) = s.handle_line(bad);
            assert!(!r.ok && !closed, "{bad}");
            assert_eq!(code(&r), "malformed", "{bad}");
        }
        let (r, _) = s.handle_line(r#"{"cmd":"step","action":[0,0]}"#);
        assert!(r.ok);
        assert_eq!(r.grid.unwrap(), pos);
        assert_eq!(r.info.unwrap().needle.step, 0);
    }

    #[test]
    fn unknown_case_and_unreset_step() {
        let mut s = session();
        s.handle_line(r#"{"cmd":"handshake","protocol":"bioptx/1"}"#);
        let (r, _) = s.handle_line(r#"{"cmd":"step","action":[0,0]}"#);
        assert_eq!(code(&r), "not_reset");
        let (r, _) = s.handle_line(r#"{"cmd":"reset","seed":1,"case":"nope"}"#);
        assert_eq!(code(&r), "unknown_case");
    }

    #[test]
    fn stepping_after_termination_is_rejected() {
        let mut s = session();
        s.handle_line(r#"{"cmd":"handshake","protocol":"bioptx/1"}"#);
        s.handle_line(r#"{"cmd":"reset","seed":2}"#);
        let mut last = Reply::default();
        for _ in 0..15 {
            last = s.handle_line(r#"{"cmd":"step","action":[0,0]}"#).0;
            if last.terminated == Some(true) {
                break;
            }
        }
        assert!(last.log.is_some());
        assert_eq!(s.completed().len(), 1);
        let (r, _) = s.handle_line(r#"{"cmd":"step","action":[0,0]}"#);
        assert_eq!(code(&r), "episode_finished");
        let (r, closed) = s.handle_line(r#"{"cmd":"close"}"#);
        assert!(r.ok && closed);
    }

    #[test]
    fn request_schema_round_trip() {
        for req in [
            Request::Handshake {
                protocol: PROTOCOL.into(),
            },
            Request::Reset { seed: 3, case: None },
            Request::Reset {
                seed: 3,
                case: Some("c".into()),
            },
            Request::Step { action: [1.5, -2.0] },
            Request::Close,
        ] {
            let s = serde_json::to_string(&req).unwrap();
            assert_eq!(serde_json::from_str::<Request>(&s).unwrap(), req);
        }
        assert_eq!(
            serde_json::to_string(&Request::Reset { seed: 7, case: None }).unwrap(),
            r#"{"cmd":"reset","seed":7}"#
        );
    }
}
