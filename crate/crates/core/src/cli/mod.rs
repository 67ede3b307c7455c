//! The `kala` command suite.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    comparison_tables, train_one, DirLock, Outcome, RunSummary, Split, COMPARISON_CSV, COMPARISON_TXT, LOCK_FILE,
};
pub use config::{apply_override, DataConfig, ExperimentConfig, Paths, RunConfig, OUTPUT_DIR_ENV};

use crate::error::KalaError;
use crate::trainer::GradCheckConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kala", version, about = "Knowledge-conditioned feature modulation experiments")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration value, e.g. --set model.transformer.hidden=32. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus into paths.corpus_dir.
    Generate(Common),
    /// Train model.variant, or every experiment variant and seed with --matrix.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train experiment.variants × experiment.seeds and write a comparison table.
        #[arg(long)]
        matrix: bool,
    },
    /// Score a checkpoint or a predictions file on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON lines of {"doc_id", "prediction"} to score instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Estimate forward and training FLOPs of every variant.
    Flops(Common),
    /// Modulation histograms, unseen-entity proximity and entity frequencies for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Histogram bins.
        #[arg(long, default_value_t = crate::analysis::DEFAULT_BINS)]
        bins: usize,
    },
    /// Compare backward gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to check; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training examples in the checked batch.
        #[arg(long, default_value_t = 2)]
        examples: usize,
        /// Coordinates sampled per parameter group.
        #[arg(long, default_value_t = 24)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn exit_code(e: &KalaError) -> i32 {
    match e {
        KalaError::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let common = match &cli.command {
        Command::Generate(c) | Command::Flops(c) => c,
        Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Analyze { common, .. }
        | Command::Gradcheck { common, .. } => common,
    };
    let cfg = match RunConfig::load(&common.config, &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return match e {
                KalaError::Io { .. } => EXIT_USAGE,
                other => exit_code(&other),
            };
        }
    };
    let result = match &cli.command {
        Command::Generate(_) => commands::generate(&cfg),
        Command::Train { matrix, .. } => commands::train_cmd(&cfg, *matrix),
        Command::Eval { checkpoint, predictions, split, .. } => {
            commands::eval_cmd(&cfg, checkpoint.as_deref(), (*split).into(), predictions.as_deref())
        }
        Command::Flops(_) => commands::flops_cmd(&cfg),
        Command::Analyze { checkpoint, split, bins, .. } => commands::analyze_cmd(&cfg, checkpoint, (*split).into(), *bins),
        Command::Gradcheck { checkpoint, examples, coords, tolerance, .. } => {
            let check = GradCheckConfig { coords_per_group: *coords, tolerance: *tolerance, seed: cfg.seed, ..Default::default() };
            commands::gradcheck_cmd(&cfg, checkpoint.as_deref(), *examples, &check)
        }
    };
    match result {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
