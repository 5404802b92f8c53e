//! `microturn` command-line front end.

use std::fmt::Debug;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use microturn_core::constructor::{self, ConstructError, ConstructionConfig};
use microturn_core::metrics::{self, MetricsError, DEFAULT_BC_BINS, DEFAULT_TAKEOVER_WINDOW_MS};
use microturn_core::protocol::{parse_canonical, validate_turns, ProtocolError};
use microturn_core::scenarios::{
    dimension_seed, generate_scenarios, read_ndjson, run_trials, write_ndjson, Dimension, ScenarioConfig,
    ScenarioError, ScenarioScript, Trial,
};
use microturn_core::service::{ServerConfig, ServiceError, SessionConfig};
use microturn_core::sweep::{run_sweep, SweepError, DEFAULT_GRID_MS};
use microturn_core::{IngestError, PolicyError, PolicySpec};

#[derive(Parser)]
#[command(name = "microturn", version, about = "Clocked micro-turn duplex dialogue engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn text dialogues into micro-turn training sequences.
    Construct(ConstructArgs),
    /// Generate benchmark scripts and replay them through a policy.
    Simulate(SimulateArgs),
    /// Score simulated trials.
    Evaluate(EvaluateArgs),
    /// Run the full benchmark over a grid of flush periods.
    Sweep(SweepArgs),
    /// Serve live duplex sessions over NDJSON or WebSocket.
    Serve(ServeArgs),
    /// Check training sequences for protocol violations.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct ConstructArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with construction parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the injection-rate report (JSON) here.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value = "oracle")]
    policy: PolicySpec,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with scenario parameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// A dimension name or `all`.
    #[arg(long, default_value = "all")]
    dimension: String,
    #[arg(long)]
    delta_t_ms: Option<u64>,
    #[command(flatten)]
    common: ScenarioArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of `*.trials.jsonl` files.
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a flat CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAKEOVER_WINDOW_MS)]
    takeover_window_ms: u64,
    #[arg(long, default_value_t = DEFAULT_BC_BINS)]
    bins: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated flush periods in ms.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<u64>>,
    #[command(flatten)]
    common: ScenarioArgs,
    /// Directory for sweep.csv and sweep.json; the CSV also goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "MICROTURN_BIND", default_value = "127.0.0.1:7600")]
    bind: String,
    #[arg(long, env = "MICROTURN_DELTA_T_MS", default_value_t = 600)]
    delta_t_ms: u64,
    #[arg(long, env = "MICROTURN_POLICY", default_value = "heuristic")]
    policy: PolicySpec,
    #[arg(long, env = "MICROTURN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3.0)]
    tokens_per_second: f64,
    /// Scripts file; the first script's ground truth drives the oracle.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Directory receiving one transcript per session.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Training sequences as written by `construct`.
    #[arg(long = "in")]
    input: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Construct(a) => construct(a),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = json!({ "error": error_code(&e), "detail": format!("{e:#}") });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

/// Variant name of the innermost library error in the chain.
fn error_code(e: &anyhow::Error) -> String {
    fn variant(d: &dyn Debug) -> String {
        let s = format!("{d:?}");
        s.split(|c: char| !(c.is_alphanumeric() || c == '_')).next().unwrap_or("Error").to_string()
    }
    let mut code = None;
    for cause in e.chain() {
        let found = None
            .or_else(|| cause.downcast_ref::<MetricsError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<ConstructError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<ScenarioError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<SweepError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<ServiceError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<PolicyError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<ProtocolError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<IngestError>().map(|x| variant(x)))
            .or_else(|| cause.downcast_ref::<ValidationFailed>().map(|x| variant(x)));
        code = found.or(code);
    }
    let io = e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some());
    code.unwrap_or_else(|| if io { "Io" } else { "Error" }.into())
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn construct(a: ConstructArgs) -> Result<()> {
    let mut cfg: ConstructionConfig = read_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let dialogues = constructor::read_dialogues(open(&a.input)?)?;
    let (seqs, stats) = constructor::construct(&dialogues, &cfg)?;
    let mut w = create(&a.out)?;
    constructor::write_sequences(&mut w, &seqs)?;
    w.flush()?;
    if let Some(p) = a.stats {
        write_json(&p, &stats.report())?;
    }
    log::info!("{} sequences written to {}", seqs.len(), a.out.display());
    Ok(())
}

fn scenario_config(common: &ScenarioArgs) -> Result<ScenarioConfig> {
    read_toml(common.config.as_deref())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = scenario_config(&a.common)?;
    if let Some(dt) = a.delta_t_ms {
        cfg.delta_t_ms = dt;
    }
    if cfg.delta_t_ms == 0 {
        bail!("delta_t_ms must be positive");
    }
    let dims: Vec<Dimension> = if a.dimension == "all" {
        Dimension::ALL.to_vec()
    } else {
        vec![a.dimension.parse().map_err(|e: String| anyhow::anyhow!(e))?]
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for d in dims {
        // same derivation as the suite runner, so a simulate run equals a sweep point
        let seed = dimension_seed(a.common.seed, cfg.delta_t_ms, d);
        let scripts = generate_scenarios(d, a.common.n, seed, &cfg);
        let trials = run_trials(&scripts, &a.common.policy, &cfg, seed)?;
        let mut w = create(&a.out.join(format!("{d}.scripts.jsonl")))?;
        write_ndjson(&mut w, &scripts)?;
        w.flush()?;
        let mut w = create(&a.out.join(format!("{d}.trials.jsonl")))?;
        write_ndjson(&mut w, &trials)?;
        w.flush()?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.trials)
        .with_context(|| format!("reading {}", a.trials.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.to_string_lossy().ends_with(".trials.jsonl"));
    files.sort();
    let mut trials: Vec<Trial> = Vec::new();
    for f in &files {
        trials.extend(read_ndjson::<Trial>(open(f)?).with_context(|| format!("reading {}", f.display()))?);
    }
    let report = metrics::evaluate(&trials, a.takeover_window_ms, a.bins)?;
    write_json(&a.out, &report)?;
    if let Some(p) = a.csv {
        let mut w = create(&p)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = scenario_config(&a.common)?;
    let grid = a.grid.unwrap_or_else(|| DEFAULT_GRID_MS.to_vec());
    let result = run_sweep(&grid, &a.common.policy, a.common.n, a.common.seed, &cfg)?;
    let stdout = std::io::stdout();
    result.write_csv(stdout.lock())?;
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut w = create(&dir.join("sweep.csv"))?;
        result.write_csv(&mut w)?;
        w.flush()?;
        write_json(&dir.join("sweep.json"), &result)?;
    }
    if !result.latency_strictly_increasing() {
        log::warn!("smooth-turn latency is not strictly increasing over the grid");
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let truth = match &a.script {
        Some(p) => {
            let scripts: Vec<ScenarioScript> = read_ndjson(open(p)?)?;
            Some(scripts.into_iter().next().context("script file is empty")?.truth)
        }
        None => None,
    };
    if let Some(dir) = &a.record {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let cfg = ServerConfig {
        session: SessionConfig {
            delta_t_ms: a.delta_t_ms,
            policy: a.policy,
            tokens_per_second: a.tokens_per_second,
            seed: a.seed,
            truth,
            ..SessionConfig::default()
        },
        record_dir: a.record,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let server = microturn_core::service::Server::bind(&a.bind, cfg).await?;
        eprintln!("{}", json!({ "listening": server.local_addr()?.to_string() }));
        tokio::select! {
            r = server.run() => r?,
            _ = tokio::signal::ctrl_c() => {}
        }
        Ok(())
    })
}

fn validate(a: ValidateArgs) -> Result<()> {
    let seqs = constructor::read_sequences(open(&a.input)?)?;
    let mut problems = Vec::new();
    for s in &seqs {
        if s.loss_mask.len() != s.tokens.len() || s.loss_weight.len() != s.tokens.len() {
            problems.push(json!({ "id": s.id, "rule": "length_mismatch" }));
            continue;
        }
        match parse_canonical(&s.tokens.join(" ")) {
            Err((turn, e)) => problems.push(json!({ "id": s.id, "turn": turn, "rule": "parse", "detail": e.to_string() })),
            Ok(turns) => {
                for v in validate_turns(&turns) {
                    let mut v = serde_json::to_value(v)?;
                    v["id"] = json!(s.id);
                    problems.push(v);
                }
            }
        }
    }
    println!("{}", json!({ "sequences": seqs.len(), "violations": problems.len() }));
    if !problems.is_empty() {
        for p in problems.iter().take(20) {
            log::error!("{p}");
        }
        bail!(ValidationFailed { violations: problems.len() });
    }
    Ok(())
}

#[derive(Debug)]
struct ValidationFailed {
    violations: usize,
}

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} protocol violations", self.violations)
    }
}

impl std::error::Error for ValidationFailed {}
