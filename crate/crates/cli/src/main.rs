//! `dtn` command line tool: degeneracy suites, gradient certification,
//! toy training, analysis exports, and complexity reports. Every
//! subcommand is deterministic under a fixed seed and rerunning writes
//! byte-identical artifacts.
//!
//! Exit codes: 0 when every assertion of the invoked suite holds, 1
//! when a checked property fails (the first failing property is
//! named), 2 for usage or configuration errors.

mod analyze;
mod complexity;
mod config;
mod equiv;
mod exportp;
mod gradcheck;
mod traincmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// A failed check (exit 1) or a configuration problem (exit 2).
pub enum CliError {
    /// Named property that did not hold.
    Check(String),
    /// Bad configuration, arguments, or input files.
    Config(String),
}

impl CliError {
    pub fn check(msg: impl Into<String>) -> CliError {
        CliError::Check(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(msg.into())
    }
}

impl From<dtn_core::CoreError> for CliError {
    fn from(e: dtn_core::CoreError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<dtn_toy::ToyError> for CliError {
    fn from(e: dtn_toy::ToyError) -> Self {
        match e {
            dtn_toy::ToyError::Diverged { step, .. } => {
                CliError::Check(format!("training stayed finite (diverged at step {step})"))
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("io error: {e}"))
    }
}

#[derive(Parser)]
#[command(
    name = "dtn",
    version,
    about = "Dynamic token normalization: suites, training, and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. All optional so that a JSON
/// config can supply them; an explicit flag always wins.
#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed, recorded in every artifact (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Tolerance override for the invoked suite.
    #[arg(long)]
    tol: Option<f64>,
    /// Worker threads for evaluation passes (default 1).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (default: env DTN_OUT_DIR, then ".").
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Degeneracy suite: mixed statistics against plain layer and
    /// instance normalization, plus the wide-band equivalence.
    Equiv {
        #[command(flatten)]
        common: Common,
        /// Number of random cases (default 100).
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Finite-difference certification of analytic gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Independent random restarts (default 8).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train the toy model; writes a checkpoint and a mixing trace.
    Train {
        #[command(flatten)]
        common: Common,
        /// Task: local-texture, global-shape, or constant-label.
        #[arg(long)]
        task: Option<String>,
        /// Leading-block normalizer: dtn or ln.
        #[arg(long)]
        norm: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Trace cadence in steps (default 10).
        #[arg(long)]
        trace_every: Option<usize>,
    },
    /// Attention distance, variation coefficient, and token magnitudes
    /// from a checkpoint; optionally summarize a mixing trace.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mixing trace CSV written by `train`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Samples to evaluate (default 64).
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Analytic cost deltas for named encoder geometries.
    Complexity {
        #[command(flatten)]
        common: Common,
        /// Preset: vit-t, vit-s, vit-b (star variants: vit-s*).
        #[arg(long)]
        model: Option<String>,
        /// Token pooling stride (default 1).
        #[arg(long)]
        pool_s: Option<usize>,
    },
    /// Export positional attention maps as PGM heatmaps.
    ExportP {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to read trained maps from; omitted = at init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Equiv { common, cases } => {
            let cfg = RunConfig::resolve(&common)?;
            equiv::run(&cfg, cases.or(cfg.file.cases))
        }
        Command::Gradcheck { common, trials } => {
            let cfg = RunConfig::resolve(&common)?;
            gradcheck::run(&cfg, trials.or(cfg.file.trials))
        }
        Command::Train {
            common,
            task,
            norm,
            steps,
            batch,
            samples,
            lr,
            weight_decay,
            trace_every,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            let flags = traincmd::Flags {
                task,
                norm,
                steps,
                batch,
                samples,
                lr,
                weight_decay,
                trace_every,
            };
            traincmd::run(&cfg, flags)
        }
        Command::Analyze {
            common,
            checkpoint,
            trace,
            batch,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            analyze::run(&cfg, &checkpoint, trace.as_deref(), batch.or(cfg.file.batch))
        }
        Command::Complexity {
            common,
            model,
            pool_s,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            complexity::run(&cfg, model.or(cfg.file.model.clone()), pool_s.or(cfg.file.pool_s))
        }
        Command::ExportP {
            common,
            checkpoint,
            rows,
            cols,
            heads,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            exportp::run(
                &cfg,
                checkpoint.as_deref(),
                rows.or(cfg.file.rows),
                cols.or(cfg.file.cols),
                heads.or(cfg.file.heads),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Check(prop)) => {
            eprintln!("FAIL: {prop}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
