//! Pipeline entry point: dataset synthesis, training, evaluation and the
//! verification suites, glued together by config files and per-run
//! manifests.
//!
//! Exit codes are stable: 0 ok, 2 config error, 3 I/O error, 4 training
//! abort, 5 checkpoint/dataset mismatch, 6 verification-suite failure.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Training(_) => 4,
            CliError::Mismatch(_) => 5,
            CliError::CheckFailed(_) => 6,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "voiceface",
    version,
    about = "Cross-modal voice-face association: synthesize, train, evaluate, verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-modal dataset from the synth.* config keys
    Synth {
        /// config file (key = value, dotted sections)
        #[arg(long)]
        config: PathBuf,
        /// output dataset file
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three-stage training pipeline on a dataset
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// directory that will hold the run directory
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// run directory name (default: run-<unix-time>-s<seed>)
        #[arg(long)]
        run_name: Option<String>,
        /// drop the explicit alignment term (ablation -E)
        #[arg(long)]
        no_explicit: bool,
        /// drop the implicit alignment term (ablation -I; implies --no-reweight)
        #[arg(long)]
        no_implicit: bool,
        /// skip identity re-weighting (ablation -W)
        #[arg(long)]
        no_reweight: bool,
        /// override the kept-identity ratio
        #[arg(long)]
        r_keep: Option<f64>,
        /// override the root seed (VF_SEED wins over this)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: matching, verification and retrieval grids
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// train | validation | test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// query-generation seed (default: the dataset's seed)
        #[arg(long)]
        seed: Option<u64>,
        /// optional config whose train.* dims the checkpoint must match
        #[arg(long)]
        config: Option<PathBuf>,
        /// also export the split's embedding table
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Verification suites; nonzero exit on any failure
    Check {
        #[command(subcommand)]
        suite: CheckSuite,
    },
}

#[derive(Subcommand)]
enum CheckSuite {
    /// finite-difference gradient checks through encoders and losses
    Grad {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// number of random instances
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// coordinates checked per loss per instance
        #[arg(long, default_value_t = 100)]
        coords: usize,
        /// write the suite report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Monte-Carlo verification of the implicit-loss lower bound
    Bound {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// hinge bracketing of the explicit loss
    Hinge {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn init_thread_pool() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(config::THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("{} must be an integer, got {v:?}", config::THREADS_ENV)))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    init_thread_pool()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { config, out } => commands::synth(&config, &out),
        Command::Train {
            config: config_path,
            dataset,
            out_dir,
            run_name,
            no_explicit,
            no_implicit,
            no_reweight,
            r_keep,
            seed,
        } => {
            let overrides = config::Overrides {
                seed,
                keep_ratio: r_keep,
                disable_explicit: no_explicit,
                disable_implicit: no_implicit,
                disable_reweighting: no_reweight,
            };
            commands::train(&config_path, &dataset, &out_dir, run_name.as_deref(), &overrides)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out_dir,
            seed,
            config,
            export_embeddings,
        } => commands::eval(
            &checkpoint,
            &dataset,
            &split,
            &out_dir,
            seed,
            config.as_deref(),
            export_embeddings,
        ),
        Command::Check { suite } => match suite {
            CheckSuite::Grad {
                seed,
                trials,
                coords,
                report,
            } => commands::check_grad(seed, trials, coords, report.as_deref()),
            CheckSuite::Bound { seed, trials, report } => {
                commands::check_bound(seed, trials, report.as_deref())
            }
            CheckSuite::Hinge { seed, trials, report } => {
                commands::check_hinge(seed, trials, report.as_deref())
            }
        },
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("voiceface: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
