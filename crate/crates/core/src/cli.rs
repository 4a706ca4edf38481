//! Command-line entry points.
//!
//! Exit codes: 0 ok, 1 I/O or failed verification, 2 configuration or usage,
//! 3 dataset fingerprint mismatch, 4 numerical failure, 5 policy collapse.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{load_config, ConfigError};
use crate::dataset::fingerprint;
use crate::error::Error;
use crate::evaluator::{compare_policies, parse_grid, policy_slice_export, write_slice_csv};
use crate::model::Dataset;
use crate::oracles::verify::{self, Level};
use crate::simulator::simulate_dataset;
use crate::trainer::{train_from, Checkpoint, ReplayBundle, TrainHooks};
use crate::value_net::ValueNetwork;

#[derive(Debug, Parser)]
#[command(name = "softhjb", version, about = "Offline soft-HJB value learning and policy extraction")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a behavioral dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the value network to a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Final checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Compare return distributions and regularized costs of the behavioral and extracted policies.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Export the extracted mixture along one state coordinate.
    Slice {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dim: usize,
        /// `lo:hi:n`
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle checks and print a JSON report.
    Verify {
        #[arg(long, value_enum, default_value = "quick")]
        level: Level,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("dataset fingerprint {found} does not match config fingerprint {expected} (use --allow-mismatch to override)")]
    Fingerprint { expected: String, found: String },
    #[error("{0}")]
    Run(#[from] Error),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; replay bundle written to {replay}")]
    NonFinite { epoch: usize, batch: usize, replay: String },
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Fingerprint { .. } => 3,
            CliError::NonFinite { .. } => 4,
            CliError::VerifyFailed(_) => 1,
            CliError::Run(e) => match e.root() {
                Error::CurvatureCollapse { .. } => 5,
                Error::NonFiniteLoss { .. } | Error::DegenerateCost(_) | Error::QuadratureNonConvergent(_) => 4,
                Error::Invalid { .. } | Error::DimensionMismatch { .. } => 2,
                _ => 1,
            },
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_network(path: &Path) -> Result<ValueNetwork, CliError> {
    Ok(ValueNetwork::from_json(&std::fs::read_to_string(path).map_err(Error::from)?)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            metrics,
            resume,
            allow_mismatch,
        } => train(&config, &data, &out, metrics, resume, allow_mismatch),
        Command::Evaluate { config, model, out_dir } => evaluate(&config, &model, &out_dir),
        Command::Slice {
            config,
            model,
            dim,
            grid,
            out,
        } => slice(&config, &model, dim, &grid, &out),
        Command::Verify { level, out } => verify_cmd(level, out),
    }
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.raw.simulate.seed);
    let ds = simulate_dataset(
        cfg.spec(),
        &cfg.policy,
        cfg.raw.simulate.n_trajectories,
        seed,
        &cfg.raw.simulate.initial_states,
    )?;
    ds.save(out)?;
    println!("trajectories: {}", ds.trajectories.len());
    println!("steps: {}", ds.n_steps);
    println!("seed: {seed}");
    println!("fingerprint: {}", ds.spec_fingerprint);
    if !ds.trajectories.is_empty() {
        for (i, (lo, hi)) in ds.state_bounds().iter().enumerate() {
            println!("x[{i}] in [{lo:.6}, {hi:.6}]");
        }
    }
    Ok(())
}

fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    metrics: Option<PathBuf>,
    resume: Option<PathBuf>,
    allow_mismatch: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let ds = Dataset::load(data)?;
    let expected = fingerprint(cfg.spec(), &cfg.policy);
    if ds.spec_fingerprint != expected {
        if !allow_mismatch {
            return Err(CliError::Fingerprint {
                expected,
                found: ds.spec_fingerprint,
            });
        }
        eprintln!("warning: dataset fingerprint mismatch ignored");
    }
    let tc = &cfg.raw.train;
    let start = match &resume {
        Some(path) => Checkpoint::load(path)?,
        None => Checkpoint::fresh(tc.initial_network(&ds)?),
    };
    let replay_path = with_suffix(out, ".replay.json");
    let hooks = TrainHooks {
        on_checkpoint: Some(Box::new(|c: &Checkpoint| {
            c.save(&with_suffix(out, &format!(".epoch-{:04}.json", c.training.epochs_completed)))
        })),
        on_non_finite: Some(Box::new(|b: &ReplayBundle| {
            std::fs::write(&replay_path, serde_json::to_string_pretty(b)?)?;
            Ok(())
        })),
        on_epoch: Some(Box::new(|m| {
            eprintln!(
                "epoch {:>4}  loss {:.6e}  hj {:.6e}  dS {:.6e}  clamps {}  lr {:.2e}",
                m.epoch, m.mean_loss, m.hj_term, m.delta_s_term, m.clamp_events, m.learning_rate
            );
        })),
    };
    let done = match train_from(start, &ds, cfg.spec(), &cfg.policy, tc, hooks) {
        Ok(done) => done,
        Err(Error::NonFiniteLoss { epoch, batch }) => {
            return Err(CliError::NonFinite {
                epoch,
                batch,
                replay: replay_path.display().to_string(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    done.save(out)?;
    let metrics = metrics.unwrap_or_else(|| with_suffix(out, ".metrics.csv"));
    done.training
        .metrics
        .write_csv(std::fs::File::create(&metrics).map_err(Error::from)?)?;
    println!("checkpoint: {}", out.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn evaluate(config: &Path, model: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let net = load_network(model)?;
    let ev = &cfg.raw.evaluate;
    let start = cfg.start_state();
    let c = compare_policies(cfg.spec(), &cfg.policy, &net, &start, ev.n_paths, ev.seed, ev.n_kl, ev.action_mode)?;
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    let create = |name: &str| std::fs::File::create(out_dir.join(name)).map_err(Error::from);
    c.behavior_returns.write_csv(create("returns_behavior.csv")?)?;
    c.extracted_returns.write_csv(create("returns_extracted.csv")?)?;
    std::fs::write(
        out_dir.join("comparison.json"),
        serde_json::to_string_pretty(&c.report).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    let r = &c.report;
    println!(
        "behavior  J = {:.6e} +- {:.2e}",
        r.behavior.regularized_cost.total, r.behavior.regularized_cost.total_se
    );
    println!(
        "extracted J = {:.6e} +- {:.2e}",
        r.extracted.regularized_cost.total, r.extracted.regularized_cost.total_se
    );
    println!("improvement z = {:.3}", r.improvement.z_score);
    Ok(())
}

fn slice(config: &Path, model: &Path, dim: usize, grid: &str, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let n = cfg.spec().state_dim;
    if dim >= n {
        return Err(CliError::Usage(format!("--dim {dim} out of range: state_dim is {n}")));
    }
    let grid = parse_grid(grid).map_err(|e| CliError::Usage(e.to_string()))?;
    let net = load_network(model)?;
    let rows = policy_slice_export(&net, &cfg.policy, cfg.spec(), dim, &grid, &cfg.start_state())?;
    write_slice_csv(&rows, cfg.spec().action_dim, std::fs::File::create(out).map_err(Error::from)?)?;
    let collapsed = rows.iter().filter(|r| r.collapsed).count();
    println!("rows: {} (collapsed: {collapsed})", rows.len());
    Ok(())
}

fn verify_cmd(level: Level, out: Option<PathBuf>) -> Result<(), CliError> {
    let report = verify::run(level);
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match out {
        Some(path) => std::fs::write(path, &text).map_err(Error::from)?,
        None => writeln!(std::io::stdout(), "{text}").map_err(Error::from)?,
    }
    if !report.all_pass {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.check_name.as_str())
            .collect();
        return Err(CliError::VerifyFailed(failed.join(", ")));
    }
    Ok(())
}

/// Parses `std::env::args`, runs, prints any error and maps it to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
