mod serve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covert_leader::adversary::AdversaryParams;
use covert_leader::config::{resolve_config_path, RunConfig};
use covert_leader::evalkit::{
    emit_plots, ensure_same_env, evaluate, export_traces, rollout_episodes, team_size_sweep, EvalReport, PolicySource,
    SizePoint,
};
use covert_leader::numcore::checkpoint::write_atomic;
use covert_leader::numcore::Checkpoint;
use covert_leader::pipeline::{run_all_with_progress, Pipeline, Stage};
use covert_leader::policy::{ActMode, PolicyParams};
use covert_leader::ppo::IterationLog;
use covert_leader::Error;

#[derive(Parser)]
#[command(name = "covert-leader", version, about = "Train and evaluate teams that hide their leader")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `section.key = value` lines (the COVERT_LEADER_CONFIG variable wins).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set env.horizon=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    /// Print the resolved config and progress.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train the team on the goal reward alone.
    TrainNaive(RunDir),
    /// Stage 2a: roll out the stage-1 policy into a trajectory dataset.
    Collect(RunDir),
    /// Stage 2b: fit the leader-identifying adversary.
    TrainAdversary(RunDir),
    /// Stage 3: retrain the team against the frozen adversary.
    TrainHiding(RunDir),
    /// Run every stage that has not completed yet.
    RunAll(RunDir),
    /// Evaluate a policy and write a JSON report.
    Eval(EvalArgs),
    /// Adversary accuracy across team sizes.
    SweepN(SweepArgs),
    /// Write replayable episode traces for the web client.
    ExportTraces(ExportArgs),
    /// Render CSV and SVG plots from saved reports.
    EmitPlots(PlotArgs),
    /// Serve traces, static assets and the guess log over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunDir {
    #[arg(long, default_value = "runs/default")]
    run_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Pd,
    RandomWalk,
    Idle,
}

#[derive(Args)]
struct PolicyArgs {
    /// Policy checkpoint to run.
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Run a non-learned team instead of a checkpoint.
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    baseline: Option<Baseline>,
    /// Name recorded in reports and trace ids.
    #[arg(long)]
    label: Option<String>,
    /// Team size; defaults to env.n_agents.
    #[arg(long)]
    n: Option<usize>,
    /// Defaults to eval.episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    /// Adversary checkpoint; enables hiding metrics.
    #[arg(long)]
    adversary: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    adversary: PathBuf,
    /// Comma-separated sizes; defaults to eval.sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    adversary: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Report files written by `eval --out`.
    #[arg(long, required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Sweep file written by `sweep-n --out`.
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    traces: PathBuf,
    /// Directory of web client assets served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Guess log; defaults to `guesses.jsonl` inside the trace directory.
    #[arg(long)]
    guesses: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let config = match resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.global.verbose {
        print!("{}", config.to_kv_string());
    }
    match run(cli.command, &config, cli.global.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn resolve(g: &Global) -> covert_leader::Result<RunConfig> {
    let mut config = match resolve_config_path(g.config.as_deref()) {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(config)
}

fn progress(r: &IterationLog) {
    if r.iteration % 10 == 0 {
        log::info!(
            "iteration {} primary {:.2} hiding {:.3} entropy {:.3}",
            r.iteration,
            r.mean_primary_reward,
            r.mean_hiding_reward,
            r.entropy
        );
    }
}

fn run(command: Command, config: &RunConfig, seed: u64) -> covert_leader::Result<()> {
    let stage = |dir: &Path, s: Stage| -> covert_leader::Result<()> {
        let mut p = Pipeline::open(dir, config, seed)?;
        p.run_stage(s, &mut progress)?;
        println!("{}", serde_json::to_string_pretty(&p.manifest)?);
        Ok(())
    };
    match command {
        Command::TrainNaive(a) => stage(&a.run_dir, Stage::Naive),
        Command::Collect(a) => stage(&a.run_dir, Stage::Collect),
        Command::TrainAdversary(a) => stage(&a.run_dir, Stage::Adversary),
        Command::TrainHiding(a) => stage(&a.run_dir, Stage::Hiding),
        Command::RunAll(a) => {
            let m = run_all_with_progress(&a.run_dir, config, seed, &mut progress)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Command::Eval(a) => {
            let source = policy_source(&a.policy, config)?;
            let adversary = a.adversary.as_deref().map(|p| load_adversary(p, config)).transpose()?;
            let n = a.policy.n.unwrap_or(config.env.n_agents);
            let episodes = a.policy.episodes.unwrap_or(config.eval.episodes);
            let mut report = evaluate(&source, adversary.as_ref(), &config.env, n, episodes, config.eval.goal_radius, seed)?;
            if let Some(label) = &a.policy.label {
                report.algorithm.clone_from(label);
            }
            emit_json(&report, a.out.as_deref())
        }
        Command::SweepN(a) => {
            let source = policy_source(&a.policy, config)?;
            let adversary = load_adversary(&a.adversary, config)?;
            let sizes = if a.sizes.is_empty() { config.eval.sizes.clone() } else { a.sizes };
            let episodes = a.policy.episodes.unwrap_or(config.eval.episodes);
            let points = team_size_sweep(&source, &adversary, &config.env, &sizes, episodes, config.eval.goal_radius, seed)?;
            emit_json(&points, a.out.as_deref())
        }
        Command::ExportTraces(a) => {
            let source = policy_source(&a.policy, config)?;
            let adversary = a.adversary.as_deref().map(|p| load_adversary(p, config)).transpose()?;
            let n = a.policy.n.unwrap_or(config.env.n_agents);
            let episodes = a.policy.episodes.unwrap_or(10);
            let eps = rollout_episodes(&source, &config.env, adversary.as_ref(), n, episodes, seed, ActMode::Greedy)?;
            let label = a.policy.label.as_deref().unwrap_or(source.label());
            let entries = export_traces(&eps, label, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&entries)?);
            Ok(())
        }
        Command::EmitPlots(a) => {
            let reports: Vec<EvalReport> = a.reports.iter().map(|p| read_json(p)).collect::<Result<_, _>>()?;
            let sweep: Vec<SizePoint> = a.sweep.as_deref().map(read_json).transpose()?.unwrap_or_default();
            for (path, r) in a.reports.iter().zip(&reports).skip(1) {
                ensure_same_env(&reports[0].config, &r.config, path)?;
            }
            emit_plots(&reports, &sweep, &a.out)?;
            println!("plots written to {}", a.out.display());
            Ok(())
        }
        Command::Serve(a) => {
            let guesses = a.guesses.unwrap_or_else(|| a.traces.join("guesses.jsonl"));
            let server = serve::Server::bind(a.port, a.traces, a.static_dir, guesses)?;
            eprintln!("serving on http://{}", server.addr());
            server.run(a.threads.max(1));
            Ok(())
        }
    }
}

fn policy_source(a: &PolicyArgs, config: &RunConfig) -> covert_leader::Result<PolicySource> {
    match (a.baseline, &a.checkpoint) {
        (Some(Baseline::Pd), _) => Ok(PolicySource::Scripted(config.baseline.clone())),
        (Some(Baseline::RandomWalk), _) => Ok(PolicySource::RandomWalk),
        (Some(Baseline::Idle), _) => Ok(PolicySource::Idle),
        (None, Some(path)) => {
            let ck = load_checked(path, "policy", config)?;
            Ok(PolicySource::Learned(PolicyParams::from_checkpoint(&ck)?))
        }
        (None, None) => Err(Error::Argument("--checkpoint is required".into())),
    }
}

fn load_adversary(path: &Path, config: &RunConfig) -> covert_leader::Result<AdversaryParams> {
    AdversaryParams::from_checkpoint(&load_checked(path, "adversary", config)?)
}

/// Loads a checkpoint and refuses one trained under a different environment.
fn load_checked(path: &Path, kind: &str, config: &RunConfig) -> covert_leader::Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(kind)?;
    ensure_same_env(&ck.config, &serde_json::json!({ "env": config.env }), path)?;
    Ok(ck)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> covert_leader::Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Integrity {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> covert_leader::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}
