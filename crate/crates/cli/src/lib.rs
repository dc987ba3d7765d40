//! Command-line driver: data generation, pre-training, fine-tuning,
//! generation, benchmarking, seed sweeps, ablations and gradient checks.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::CheckpointError;
use crate::config::{load_config, ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// A required data split or checkpoint is absent.
#[derive(Debug, thiserror::Error)]
#[error("missing {what} at {path}; {hint}")]
pub struct MissingInput {
    pub what: String,
    pub path: PathBuf,
    pub hint: String,
}

/// At least one gradient check exceeded its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("{failed} of {total} gradient checks failed")]
pub struct GradcheckFailed {
    pub failed: usize,
    pub total: usize,
}

#[derive(Debug, Parser)]
#[command(name = "ctxdiff", version = manifest::BUILD_ID, about = "Context-rewarded diffusion fine-tuning on a synthetic scene world")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run config; absent keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Diffusion model without adapters.
    NoFinetune,
    /// Reference plus uniform pixel noise.
    PixelJitter,
    /// Reference image unchanged.
    Identity,
    /// Uniform gray image.
    Gray,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::NoFinetune => "no-finetune",
            Baseline::PixelJitter => "pixel-jitter",
            Baseline::Identity => "identity",
            Baseline::Gray => "gray",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, held-out and evaluation splits.
    GenData,
    /// Train the encoders and evaluator.
    PretrainEvaluator,
    /// Train the conditional denoiser on frozen encoders.
    PretrainDiffusion,
    /// Fine-tune denoiser adapters against the evaluator rewards.
    Finetune,
    /// Write generated images for evaluation contexts as PPM files.
    Generate {
        /// Number of evaluation contexts.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Images per context; defaults to `bench.n_seeds`.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// TTA accuracy, consistency, diversity and Frechet distance.
    Bench {
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Pairwise diversity as a function of the number of seeds.
    SweepSeeds {
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Fine-tune with each reward setting and compare.
    Ablate,
    /// Finite-difference checks of every op and model component.
    Gradcheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainEvaluator => "pretrain-evaluator",
            Command::PretrainDiffusion => "pretrain-diffusion",
            Command::Finetune => "finetune",
            Command::Generate { .. } => "generate",
            Command::Bench { .. } => "bench",
            Command::SweepSeeds { .. } => "sweep-seeds",
            Command::Ablate => "ablate",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &global.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &global.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &global.checkpoint_dir {
        cfg.paths.checkpoint_dir = d.clone();
    }
    if let Some(d) = &global.report_dir {
        cfg.paths.report_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<MissingInput>() {
            return EXIT_MISSING;
        }
        if let Some(CheckpointError::Missing(_)) = cause.downcast_ref::<CheckpointError>() {
            return EXIT_MISSING;
        }
    }
    EXIT_FAILURE
}

fn clap_exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
        ErrorKind::InvalidSubcommand
        | ErrorKind::MissingSubcommand
        | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_USAGE,
        _ => EXIT_CONFIG,
    }
}

fn init_threads() -> Result<(), ConfigError> {
    let Ok(v) = std::env::var("HB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::Invalid(format!("HB_THREADS must be a positive integer, got {v:?}")))?;
    // A pool already built by an earlier call in this process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return clap_exit_code(e.kind());
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    let cfg = match resolve_config(&cli.global) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match commands::dispatch(&cli.command, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
