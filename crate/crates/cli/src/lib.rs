//! Command-line front end: every subcommand reads one JSON experiment
//! config and writes deterministic JSON/CSV artifacts to the output
//! directory.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or incomplete configuration; exit status 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running a valid configuration; exit status 1.
    #[error(transparent)]
    Runtime(#[from] fairspec::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fairspec",
    version,
    about = "Confusion-matrix spectral regularization for robust fairness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the worker thread count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate blob train/test CSVs.
    Synth,
    /// Adversarial training from scratch.
    Train,
    /// Fine-tune the checkpoint given in `model.checkpoint`.
    Finetune,
    /// Clean and robust per-class evaluation of a checkpoint.
    Eval,
    /// Worst-class bound report for a checkpoint.
    Bound,
    /// Sharpness-variance search for a checkpoint.
    Sharpness,
    /// Monte Carlo study of ‖C‖₁/‖C‖₂ on random confusion matrices.
    NuStudy,
}

/// Logging goes to stderr; the level comes from `FAIRSPEC_LOG`
/// (`error`, `info` or `debug`, default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("FAIRSPEC_LOG", "info");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Applies flag overrides, resolves the config and runs the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let cfg = cfg.resolve()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    commands::dispatch(cli.command, &cfg)
}

/// Runs the CLI on `args` (including the program name) and maps the
/// outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
