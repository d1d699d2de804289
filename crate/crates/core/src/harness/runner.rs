//! Cohort experiments: run one strategy over every case and write the logs,
//! summary tables, metric samples and a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use super::bridge::{serve, BridgeSession, Plan, PROTOCOL};
use super::cases::{Case, CaseStore, CohortSpec};
use super::compare::MetricSamples;
use super::logs::{read_lines, EpisodeLine, LOG_SCHEMA};
use super::HarnessError;
use crate::env::{BiopsyEnv, EnvConfig, EpisodeLog};
use crate::metrics::{aggregate, EpisodeMetrics, MeanSd, NeedleSelection};
use crate::policy::{load_checkpoint, policy_episode, PolicyParams, TrainConfig};
use crate::strategies::{Baseline, BiasDirection, Perturbation};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const TABLE_FILE: &str = "table.csv";
pub const SIZE_FILE: &str = "size_breakdown.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_DIR: &str = "samples";
/// Runs with a larger share of failed cases should be treated as failed.
pub const MAX_FAIL_FRACTION: f64 = 0.1;

const SEED_STREAM: u64 = 0x636f_686f_7274_2121;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CohortSource {
    Synthetic(CohortSpec),
    /// A directory of `.bvol` cases.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    Agent {
        checkpoint: PathBuf,
    },
    Sweep,
    Scout,
    /// A program that drives each case over `bioptx/1` on its stdin/stdout.
    Remote {
        command: Vec<String>,
    },
    /// Previously recorded operator sessions (JSON-lines file or directory).
    Human {
        logs: PathBuf,
    },
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::Agent { .. } => "agent",
            StrategySpec::Sweep => "sweep",
            StrategySpec::Scout => "scout",
            StrategySpec::Remote { .. } => "remote",
            StrategySpec::Human { .. } => "human",
        }
    }

    fn baseline(&self) -> Option<Baseline> {
        match self {
            StrategySpec::Sweep => Some(Baseline::Sweep),
            StrategySpec::Scout => Some(Baseline::Scout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationGrid {
    pub bias_mm: Vec<f64>,
    pub sd_mm: Vec<f64>,
    pub direction: BiasDirection,
}

impl Default for PerturbationGrid {
    fn default() -> Self {
        Self {
            bias_mm: vec![0.0, 5.0, 10.0],
            sd_mm: vec![0.0, 5.0, 10.0],
            direction: BiasDirection::PlusX,
        }
    }
}

impl PerturbationGrid {
    pub fn points(&self) -> Vec<Perturbation> {
        let mut out = Vec::new();
        for &bias_mm in &self.bias_mm {
            for &sd_mm in &self.sd_mm {
                out.push(Perturbation {
                    bias_mm,
                    sd_mm,
                    direction: self.direction,
                });
            }
        }
        out
    }
}

fn default_episodes() -> usize {
    1
}

fn default_threshold() -> f64 {
    0.4
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cohort: CohortSource,
    pub strategy: StrategySpec,
    #[serde(default)]
    pub grid: PerturbationGrid,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_episodes")]
    pub episodes_per_case: usize,
    /// Seeds every episode; episodes of a case share seeds across rows.
    #[serde(default)]
    pub seed: u64,
    /// Lesions below this volume count as small in the size breakdown.
    #[serde(default = "default_threshold")]
    pub size_threshold_cc: f64,
    #[serde(default)]
    pub needle_selection: NeedleSelection,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(cohort: CohortSource, strategy: StrategySpec, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            cohort,
            strategy,
            grid: PerturbationGrid::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            episodes_per_case: 1,
            seed: 0,
            size_threshold_cc: default_threshold(),
            needle_selection: NeedleSelection::All,
            workers: 1,
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        match &self.cohort {
            CohortSource::Synthetic(spec) => spec.validate()?,
            CohortSource::Dir(d) if !d.is_dir() => return bad(format!("cases directory {} not found", d.display())),
            CohortSource::Dir(_) => {}
        }
        match &self.strategy {
            StrategySpec::Agent { checkpoint } if !checkpoint.is_file() => {
                return bad(format!("checkpoint {} not found", checkpoint.display()))
            }
            StrategySpec::Human { logs } if !logs.exists() => {
                return bad(format!("human logs {} not found", logs.display()))
            }
            StrategySpec::Remote { command } if command.is_empty() => return bad("remote command is empty".into()),
            _ => {}
        }
        if self.strategy.baseline().is_some() {
            let vals = self.grid.bias_mm.iter().chain(&self.grid.sd_mm);
            if self.grid.bias_mm.is_empty() || self.grid.sd_mm.is_empty() {
                return bad("perturbation grid is empty".into());
            }
            if vals.into_iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("perturbation values must be finite and >= 0".into());
            }
        }
        if self.episodes_per_case == 0 || self.workers == 0 {
            return bad("episodes_per_case and workers must be >= 1".into());
        }
        if !(self.size_threshold_cc.is_finite() && self.size_threshold_cc > 0.0) {
            return bad("size_threshold_cc must be positive".into());
        }
        self.env.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// SHA-256 of the configuration with the output directory blanked.
    pub fn hash_hex(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_cases(&self) -> Result<CaseStore, HarnessError> {
        match &self.cohort {
            CohortSource::Synthetic(spec) => super::cases::generate_cohort(spec),
            CohortSource::Dir(d) => CaseStore::load_dir(d),
        }
    }
}

/// Per-case episode seeds, drawn case by case from the experiment seed.
pub fn episode_seeds(seed: u64, cases: usize, per_case: usize) -> Vec<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_STREAM);
    (0..cases)
        .map(|_| (0..per_case).map(|_| rng.random()).collect())
        .collect()
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub strategy: String,
    pub perturbation: Option<Perturbation>,
}

impl RowKey {
    /// File-name friendly label, e.g. `sweep_b5_sd10`.
    pub fn label(&self) -> String {
        match &self.perturbation {
            Some(p) => format!("{}_b{}_sd{}", self.strategy, fmt_num(p.bias_mm), fmt_num(p.sd_mm)),
            None => self.strategy.clone(),
        }
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "p")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub key: RowKey,
    pub episodes: usize,
    pub hr_pct: Option<MeanSd>,
    pub ccl_mm: Option<MeanSd>,
    pub na_mm2: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case: String,
    pub row: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub rows: Vec<RowSummary>,
    pub failures: Vec<CaseFailure>,
    pub cases: usize,
    pub failed_cases: usize,
    pub fail_fraction: f64,
    pub files: Vec<PathBuf>,
}

impl CohortReport {
    pub fn acceptable(&self) -> bool {
        self.fail_fraction <= MAX_FAIL_FRACTION
    }

    pub fn row(&self, label: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.key.label() == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub log_schema: String,
    pub protocol: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cases: Vec<ManifestCase>,
    pub failures: Vec<CaseFailure>,
    pub fail_fraction: f64,
    /// SHA-256 of each output, by file name.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub lesion_volume_cc: f64,
    pub seeds: Vec<u64>,
}

/// What a row produced for one case.
type RowRun = Result<Vec<EpisodeLog>, String>;

enum Runner {
    Baseline(Baseline),
    Agent(Arc<PolicyParams>),
    Remote(Vec<String>),
    Human(Arc<BTreeMap<String, Vec<EpisodeLog>>>),
}

impl Runner {
    fn run(
        &self,
        case: &Case,
        cases: &Arc<CaseStore>,
        cfg: &ExperimentConfig,
        seeds: &[u64],
        rows: &[RowKey],
    ) -> Vec<RowRun> {
        let make_env =
            || BiopsyEnv::new(case.id.clone(), case.volume.clone(), cfg.env.clone()).map_err(|e| e.to_string());
        match self {
            Runner::Baseline(b) => rows
                .iter()
                .map(|row| {
                    let p = row.perturbation.expect("baseline rows carry a perturbation");
                    let mut env = make_env()?;
                    seeds
                        .iter()
                        .map(|&s| b.run(&mut env, s, &p).map_err(|e| e.to_string()))
                        .collect()
                })
                .collect(),
            Runner::Agent(params) => {
                let run = || -> RowRun {
                    let mut env = make_env()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    seeds
                        .iter()
                        .map(|&s| policy_episode(params, &mut env, s, true, &mut rng).map_err(|e| e.to_string()))
                        .collect()
                };
                vec![run()]
            }
            Runner::Remote(command) => vec![run_remote(command, case, cases, &cfg.env, seeds)],
            Runner::Human(logs) => vec![logs
                .get(&case.id)
                .cloned()
                .ok_or_else(|| format!("no operator log for case {}", case.id))],
        }
    }
}

/// Serves `bioptx/1` to a child process for one case and collects the
/// planned episodes.
pub fn run_remote(
    command: &[String],
    case: &Case,
    cases: &Arc<CaseStore>,
    env_cfg: &EnvConfig,
    seeds: &[u64],
) -> Result<Vec<EpisodeLog>, String> {
    let mut child = Command::new(&command[0])
        .args(&command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| format!("cannot start {:?}: {e}", command[0]))?;
    let stdin = child.stdin.take().expect("piped");
    let stdout = child.stdout.take().expect("piped");
    let mut session = BridgeSession::new(cases.clone(), env_cfg.clone()).with_plan(Plan {
        case: case.id.clone(),
        seeds: seeds.to_vec(),
    });
    let served = serve(&mut session, BufReader::new(stdout), stdin);
    let status = child.wait().map_err(|e| e.to_string())?;
    served.map_err(|e| format!("bridge i/o: {e}"))?;
    if !status.success() {
        return Err(format!("remote agent exited with {status}"));
    }
    let done = session.into_completed();
    seeds
        .iter()
        .map(|&s| {
            done.iter()
                .find(|l| l.seed == s && l.case_id == case.id)
                .cloned()
                .ok_or_else(|| format!("remote agent did not complete seed {s}"))
        })
        .collect()
}

/// Operator logs grouped by case id, from a file or a directory of
/// `.jsonl` files read in name order.
pub fn load_human_logs(path: &Path) -> Result<BTreeMap<String, Vec<EpisodeLog>>, HarnessError> {
    let mut files = Vec::new();
    if path.is_dir() {
        for e in fs::read_dir(path).map_err(|e| HarnessError::io(path, e))? {
            let p = e.map_err(|e| HarnessError::io(path, e))?.path();
            if p.extension().and_then(|x| x.to_str()) == Some("jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out: BTreeMap<String, Vec<EpisodeLog>> = BTreeMap::new();
    for f in files {
        let file = fs::File::open(&f).map_err(|e| HarnessError::io(&f, e))?;
        for line in read_lines(BufReader::new(file))? {
            out.entry(line.log.case_id.clone()).or_default().push(line.log);
        }
    }
    Ok(out)
}

fn rows_for(cfg: &ExperimentConfig) -> Vec<RowKey> {
    let name = cfg.strategy.name().to_string();
    match cfg.strategy.baseline() {
        Some(_) => cfg
            .grid
            .points()
            .into_iter()
            .map(|p| RowKey {
                strategy: name.clone(),
                perturbation: Some(p),
            })
            .collect(),
        None => vec![RowKey {
            strategy: name,
            perturbation: None,
        }],
    }
}

fn summarize(key: RowKey, metrics: &[EpisodeMetrics]) -> RowSummary {
    let agg = aggregate(metrics).ok();
    RowSummary {
        key,
        episodes: metrics.len(),
        hr_pct: agg.map(|a| a.hr_pct),
        ccl_mm: agg.map(|a| a.ccl_mm),
        na_mm2: agg.map(|a| a.na_mm2),
    }
}

fn csv_cells(r: &RowSummary) -> String {
    let ms = |m: Option<MeanSd>| match m {
        Some(m) => format!("{:.4},{:.4}", m.mean, m.sd),
        None => ",".into(),
    };
    format!("{},{},{},{}", r.episodes, ms(r.hr_pct), ms(r.ccl_mm), ms(r.na_mm2))
}

fn csv_key(k: &RowKey) -> String {
    match &k.perturbation {
        Some(p) => format!("{},{},{}", k.strategy, p.bias_mm, p.sd_mm),
        None => format!("{},,", k.strategy),
    }
}

pub fn table_csv(rows: &[RowSummary]) -> String {
    let mut s = String::from("strategy,bias_mm,sd_mm,n,hr_mean,hr_sd,ccl_mean,ccl_sd,na_mean,na_sd\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", csv_key(&r.key), csv_cells(r));
    }
    s
}

pub fn size_csv(rows: &[(RowSummary, RowSummary)]) -> String {
    let mut s = String::from("strategy,bias_mm,sd_mm,size,n,hr_mean,hr_sd,ccl_mean,ccl_sd,na_mean,na_sd\n");
    for (small, large) in rows {
        for (size, r) in [("small", small), ("large", large)] {
            let _ = writeln!(s, "{},{size},{}", csv_key(&r.key), csv_cells(r));
        }
    }
    s
}

fn write_file(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    outputs: &mut BTreeMap<String, String>,
) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
    outputs.insert(
        name.to_string(),
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect(),
    );
    Ok(path)
}

/// Runs the configured strategy over the cohort and writes every report.
///
/// Case failures are recorded, not raised; check
/// [`CohortReport::acceptable`]. Outputs are a function of the configuration
/// alone, whatever the worker count.
pub fn run_cohort(cfg: &ExperimentConfig) -> Result<CohortReport, HarnessError> {
    cfg.validate()?;
    let cases = Arc::new(cfg.load_cases()?);
    let case_list: Vec<&Case> = cases.iter().collect();
    let seeds = episode_seeds(cfg.seed, case_list.len(), cfg.episodes_per_case);
    let rows = rows_for(cfg);
    let runner = match &cfg.strategy {
        StrategySpec::Agent { checkpoint } => Runner::Agent(Arc::new(load_checkpoint(checkpoint)?.0)),
        StrategySpec::Remote { command } => Runner::Remote(command.clone()),
        StrategySpec::Human { logs } => Runner::Human(Arc::new(load_human_logs(logs)?)),
        s => Runner::Baseline(s.baseline().expect("remaining strategies are baselines")),
    };

    let results: Mutex<Vec<Option<Vec<RowRun>>>> = Mutex::new(vec![None; case_list.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(case_list.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(case) = case_list.get(k) else { break };
                let out = runner.run(case, &cases, cfg, &seeds[k], &rows);
                results.lock().expect("results lock")[k] = Some(out);
            });
        }
    });
    let results: Vec<Vec<RowRun>> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every case ran"))
        .collect();

    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut per_row: Vec<Vec<(f64, EpisodeMetrics)>> = vec![Vec::new(); rows.len()];
    for (ri, row) in rows.iter().enumerate() {
        for (case, runs) in case_list.iter().zip(&results) {
            match &runs[ri] {
                Ok(logs) => {
                    for log in logs {
                        let m = EpisodeMetrics::from_log(log, case.lesion_volume_cc, cfg.needle_selection);
                        per_row[ri].push((case.lesion_volume_cc, m));
                        lines.push(EpisodeLine::new(
                            &row.strategy,
                            row.perturbation,
                            case.lesion_volume_cc,
                            log.clone(),
                        ));
                    }
                }
                Err(e) => {
                    warn!(case = %case.id, row = %row.label(), "case failed: {e}");
                    failures.push(CaseFailure {
                        case: case.id.clone(),
                        row: row.label(),
                        error: e.clone(),
                    });
                }
            }
        }
    }
    let failed_cases = results.iter().filter(|r| r.iter().any(Result::is_err)).count();
    let fail_fraction = failed_cases as f64 / case_list.len() as f64;

    let mut summaries = Vec::new();
    let mut sizes = Vec::new();
    let mut samples = Vec::new();
    for (row, ms) in rows.iter().zip(&per_row) {
        let all: Vec<EpisodeMetrics> = ms.iter().map(|(_, m)| m.clone()).collect();
        let part = |small: bool| -> Vec<EpisodeMetrics> {
            ms.iter()
                .filter(|(cc, _)| (*cc < cfg.size_threshold_cc) == small)
                .map(|(_, m)| m.clone())
                .collect()
        };
        summaries.push(summarize(row.clone(), &all));
        sizes.push((
            summarize(row.clone(), &part(true)),
            summarize(row.clone(), &part(false)),
        ));
        samples.push(MetricSamples::from_metrics(&row.label(), &all));
    }
    if cfg.strategy.baseline().is_some() {
        let slot = RowKey {
            strategy: "agent".into(),
            perturbation: None,
        };
        summaries.insert(0, summarize(slot, &[]));
    }

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut outputs = BTreeMap::new();
    let mut files = Vec::new();
    let mut buf = Vec::new();
    for l in &lines {
        writeln!(buf, "{}", l.to_line()).expect("in-memory write");
    }
    files.push(write_file(dir, EPISODES_FILE, &buf, &mut outputs)?);
    files.push(write_file(
        dir,
        TABLE_FILE,
        table_csv(&summaries).as_bytes(),
        &mut outputs,
    )?);
    files.push(write_file(dir, SIZE_FILE, size_csv(&sizes).as_bytes(), &mut outputs)?);
    for s in &samples {
        let name = format!("{SAMPLES_DIR}/{}.json", s.label);
        files.push(write_file(
            dir,
            &name,
            &serde_json::to_vec_pretty(s).expect("samples serialize"),
            &mut outputs,
        )?);
    }
    let manifest = Manifest {
        tool: "bioptx".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        log_schema: LOG_SCHEMA.into(),
        protocol: PROTOCOL.into(),
        config_hash: cfg.hash_hex(),
        config: cfg.clone(),
        cases: case_list
            .iter()
            .zip(&seeds)
            .map(|(c, s)| ManifestCase {
                id: c.id.clone(),
                lesion_volume_cc: c.lesion_volume_cc,
                seeds: s.clone(),
            })
            .collect(),
        failures: failures.clone(),
        fail_fraction,
        outputs: outputs.clone(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(
        &mpath,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| HarnessError::io(&mpath, e))?;
    files.push(mpath);

    Ok(CohortReport {
        rows: summaries,
        failures,
        cases: case_list.len(),
        failed_cases,
        fail_fraction,
        files,
    })
}
