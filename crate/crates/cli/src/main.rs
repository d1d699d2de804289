use std::io::{self, BufReader, BufWriter};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use bioptx::anatomy::load_volume;
use bioptx::env::{BiopsyEnv, EnvConfig};
use bioptx::harness::{
    compare, follow_plan, run_cohort, serve as serve_bridge, write_cohort, BridgeClient, BridgeSession, CaseStore,
    CohortReport, CohortSource, CohortSpec, ExperimentConfig, MetricSamples, PerturbationGrid, SessionManager,
    StrategySpec, DEFAULT_ALPHA,
};
use bioptx::metrics::NeedleSelection;
use bioptx::policy::{load_checkpoint, save_checkpoint, train, write_curve_csv, PolicyAgent, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "bioptx", version, about = "Template-guided biopsy targeting workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic cohort as BVOL files plus cohort.json.
    Gen(GenArgs),
    /// Run the sweeping or scouting baseline over a (bias, sd) grid.
    Baseline(BaselineArgs),
    /// Train a policy on one case.
    Train(TrainArgs),
    /// Evaluate a checkpoint, a remote agent or recorded operator logs.
    Eval(EvalArgs),
    /// Per-metric t-tests between two sample files or episode logs.
    Compare(CompareArgs),
    /// Run the HTTP/WebSocket session service.
    Serve(ServeArgs),
    /// Speak bioptx/1 on stdin/stdout, as the environment or as an agent.
    Bridge(BridgeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Cohort spec JSON; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lesion_cc_min: Option<f64>,
    #[arg(long)]
    lesion_cc_max: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Full experiment config JSON; when given, the other run flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of .bvol cases.
    #[arg(long)]
    cases: Option<PathBuf>,
    /// Generate a synthetic cohort of this many cases instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    cohort_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Environment config JSON.
    #[arg(long)]
    env: Option<PathBuf>,
    /// Score only the last N needles of each episode for HR and NA.
    #[arg(long)]
    last_n: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Sweep,
    Scout,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum, default_value = "sweep")]
    strategy: BaselineKind,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 5.0, 10.0])]
    bias: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 5.0, 10.0])]
    sd: Vec<f64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with_all = ["remote", "human"])]
    checkpoint: Option<PathBuf>,
    /// Command that drives each case over bioptx/1, e.g. `--remote "python3 agent.py"`.
    #[arg(long, conflicts_with = "human")]
    remote: Option<String>,
    /// Operator logs: a .jsonl file or a directory of them.
    #[arg(long)]
    human: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// BVOL case to train on.
    #[arg(long)]
    case: PathBuf,
    /// Where the best checkpoint is written.
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<PathBuf>,
    /// Turn off lesion localisation noise.
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Evaluation curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Also write the final weights here.
    #[arg(long)]
    last: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    cases: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Finished episodes are appended here as JSON lines.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long)]
    env: Option<PathBuf>,
}

#[derive(Args)]
struct BridgeArgs {
    /// Serve these cases (environment side).
    #[arg(long, required_unless_present = "client")]
    cases: Option<PathBuf>,
    /// Act as the agent: follow the plan in the handshake reply.
    #[arg(long, requires = "checkpoint")]
    client: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    env: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn env_config(path: &Option<PathBuf>) -> Result<EnvConfig> {
    path.as_deref().map_or_else(|| Ok(EnvConfig::default()), read_json)
}

fn experiment(run: &RunArgs, strategy: StrategySpec) -> Result<ExperimentConfig> {
    if let Some(p) = &run.config {
        let mut cfg: ExperimentConfig = read_json(p)?;
        if let Some(out) = &run.out {
            cfg.output_dir = out.clone();
        }
        return Ok(cfg);
    }
    let cohort = match (&run.cases, run.synthetic) {
        (Some(d), None) => CohortSource::Dir(d.clone()),
        (None, Some(n)) => CohortSource::Synthetic(CohortSpec {
            n_cases: n,
            seed: run.cohort_seed,
            ..Default::default()
        }),
        _ => bail!("give exactly one of --cases or --synthetic (or --config)"),
    };
    let out = run.out.clone().context("--out is required without --config")?;
    let mut cfg = ExperimentConfig::new(cohort, strategy, out);
    cfg.env = env_config(&run.env)?;
    cfg.seed = run.seed;
    cfg.episodes_per_case = run.episodes;
    cfg.workers = run.workers;
    if let Some(n) = run.last_n {
        cfg.needle_selection = NeedleSelection::LastN(n);
    }
    Ok(cfg)
}

fn finish(report: &CohortReport) -> ExitCode {
    println!(
        "{}",
        serde_json::to_string_pretty(&report.rows).expect("rows serialize")
    );
    if report.acceptable() {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "{} of {} cases failed ({:.0}%)",
            report.failed_cases,
            report.cases,
            100.0 * report.fail_fraction
        );
        ExitCode::from(2)
    }
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let mut spec: CohortSpec = a.spec.as_deref().map_or_else(|| Ok(CohortSpec::default()), read_json)?;
    if let Some(n) = a.n {
        spec.n_cases = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(v) = a.lesion_cc_min {
        spec.lesion_cc[0] = v;
    }
    if let Some(v) = a.lesion_cc_max {
        spec.lesion_cc[1] = v;
    }
    let store = write_cohort(&spec, &a.out)?;
    eprintln!("wrote {} cases to {}", store.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn baseline(a: BaselineArgs) -> Result<ExitCode> {
    let strategy = match a.strategy {
        BaselineKind::Sweep => StrategySpec::Sweep,
        BaselineKind::Scout => StrategySpec::Scout,
    };
    let mut cfg = experiment(&a.run, strategy)?;
    if a.run.config.is_none() {
        cfg.grid = PerturbationGrid {
            bias_mm: a.bias,
            sd_mm: a.sd,
            ..Default::default()
        };
    }
    Ok(finish(&run_cohort(&cfg)?))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let strategy = match (a.checkpoint, a.remote, a.human) {
        (Some(checkpoint), None, None) => StrategySpec::Agent { checkpoint },
        (None, Some(command), None) => StrategySpec::Remote {
            command: command.split_whitespace().map(String::from).collect(),
        },
        (None, None, Some(logs)) => StrategySpec::Human { logs },
        (None, None, None) if a.run.config.is_some() => StrategySpec::Sweep,
        _ => bail!("give exactly one of --checkpoint, --remote or --human"),
    };
    let cfg = experiment(&a.run, strategy)?;
    Ok(finish(&run_cohort(&cfg)?))
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg: TrainConfig = a
        .config
        .as_deref()
        .map_or_else(|| Ok(TrainConfig::default()), read_json)?;
    if let Some(n) = a.episodes {
        cfg.total_episodes = n;
    }
    let mut env_cfg = env_config(&a.env)?;
    if a.noiseless {
        env_cfg.noise_sd_mm = 0.0;
    }
    let vol = Arc::new(load_volume(&a.case).with_context(|| format!("loading {}", a.case.display()))?);
    let id = a
        .case
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("case")
        .to_string();
    let outcome = train(
        || BiopsyEnv::new(id.clone(), vol.clone(), env_cfg.clone()),
        &cfg,
        a.seed,
    )?;
    let hash = cfg.hash_hex();
    save_checkpoint(&a.out, &outcome.best, &hash)?;
    if let Some(p) = &a.last {
        save_checkpoint(p, &outcome.last, &hash)?;
    }
    if let Some(p) = &a.curve {
        let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_curve_csv(&outcome.curve, BufWriter::new(f))?;
    }
    println!("{}", serde_json::to_string_pretty(&outcome.best_point)?);
    Ok(ExitCode::SUCCESS)
}

fn compare_cmd(a: CompareArgs) -> Result<ExitCode> {
    let sa = MetricSamples::load(&a.a, NeedleSelection::All)?;
    let sb = MetricSamples::load(&a.b, NeedleSelection::All)?;
    let report = compare(&sa, &sb, a.alpha)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn serve_cmd(a: ServeArgs) -> Result<ExitCode> {
    let cases = Arc::new(CaseStore::load_dir(&a.cases)?);
    let mgr = SessionManager::new(cases, env_config(&a.env)?, a.log_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(bioptx_server::serve(a.bind, bioptx_server::AppState::new(mgr)))?;
    Ok(ExitCode::SUCCESS)
}

fn bridge_cmd(a: BridgeArgs) -> Result<ExitCode> {
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    if a.client {
        let ckpt = a.checkpoint.context("--client needs --checkpoint")?;
        let (params, _) = load_checkpoint(&ckpt)?;
        let agent = PolicyAgent {
            params: &params,
            deterministic: true,
        };
        let bound = env_config(&a.env)?.action_range;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut client = BridgeClient::new(BufReader::new(stdin), BufWriter::new(stdout));
        let logs = follow_plan(&mut client, |obs| {
            agent
                .decide(obs, bound, &mut rng)
                .map(|d| d.action)
                .unwrap_or([0.0, 0.0])
        })?;
        eprintln!("completed {} episodes", logs.len());
    } else {
        let cases = Arc::new(CaseStore::load_dir(a.cases.as_deref().expect("required by clap"))?);
        let mut session = BridgeSession::new(cases, env_config(&a.env)?);
        serve_bridge(&mut session, stdin, BufWriter::new(stdout))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Baseline(a) => baseline(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Compare(a) => compare_cmd(a),
        Cmd::Serve(a) => serve_cmd(a),
        Cmd::Bridge(a) => bridge_cmd(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
