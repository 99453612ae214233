//! overparam-lab: dataset generation, training runs, width sweeps, lemma
//! verification and spectrum reports, driven by a JSON experiment config.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime numeric error,
//! 3 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "overparam-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample datasets, validate separability, write CSVs and the report.
    Generate(Common),
    /// Run training (all repeats) and write trajectories, checkpoints and
    /// metadata.
    Train(Common),
    /// Train across the configured width sweep and aggregate statistics.
    Sweep(Common),
    /// Run the non-smooth inequality battery and the coupling bound check
    /// against existing run artifacts.
    VerifyLemmas(Common),
    /// Compute update/weight singular spectra for existing checkpoints.
    Spectrum(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON with schema_version).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rederive all domain seeds from this base seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Error carrying the exit-code category.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }

    pub fn from_core(e: overparam_core::Error) -> Self {
        use overparam_core::Error as E;
        match e {
            E::InvalidConfig(_) => CliError::Config(e.to_string()),
            E::Io(_)
            | E::IdxMagic { .. }
            | E::IdxTruncated { .. }
            | E::IdxCountMismatch { .. }
            | E::CsvParse { .. }
            | E::BadCheckpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| {
            CliError::Config("no output directory: set output_dir or pass --out".into())
        })?;
    Ok((config, out))
}

fn configure_threads() {
    let threads = std::env::var("OVERPARAM_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    // Ignore failure: the pool can only be built once (tests reuse the
    // process).
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    configure_threads();
    match &cli.command {
        Command::Generate(c) => {
            let (config, out) = resolve(c)?;
            commands::cmd_generate(&config, &out)
        }
        Command::Train(c) => {
            let (config, out) = resolve(c)?;
            commands::cmd_train(&config, &out)
        }
        Command::Sweep(c) => {
            let (config, out) = resolve(c)?;
            commands::cmd_sweep(&config, &out)
        }
        Command::VerifyLemmas(c) => {
            let (config, out) = resolve(c)?;
            commands::cmd_verify_lemmas(&config, &out)
        }
        Command::Spectrum(c) => {
            let (config, out) = resolve(c)?;
            commands::cmd_spectrum(&config, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
