//! `revpers`: world generation, anonymization, sweeps, ablations, recovery
//! attacks and plots over a Gaussian-mixture world.

mod commands;
mod config;
mod error;
mod grid;
mod plot;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Global, GuidanceFlags};
use error::{CliError, CliResult};

/// Thread-count override for the worker pool.
const THREADS_ENV: &str = "REVPERS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "revpers", version, about = "Reverse-personalization anonymization on a Gaussian-mixture world")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding run.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default configuration
    Config,
    /// Write world.json and samples.csv
    World {
        #[arg(long)]
        out: PathBuf,
        /// Rows to sample, overriding world.samples
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Anonymize a sample CSV; writes anonymized.csv and report.json
    Anonymize {
        /// Sample CSV with x_0.. columns; draws run.samples points when omitted
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        flags: GuidanceFlags,
    },
    /// Evaluate a guidance grid; writes sweep.csv, tradeoff.csv and sweep.svg
    Sweep {
        /// e.g. "cfg=-20:-5:5; ipa=1"; defaults to run.grid
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare DDPM and DDIM inversion; writes ablation.csv and ablation.json
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        flags: GuidanceFlags,
    },
    /// Re-anonymize anonymized outputs and test for the original identity
    Recover {
        /// anonymized.csv from `revpers anonymize`
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: GuidanceFlags,
    },
    /// Render sweep.csv as a four-panel SVG
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the inversion trajectory of one input row as CSV
    Invert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: GuidanceFlags,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Invalid(format!("{THREADS_ENV}: expected a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let global = Global { config: cli.config, seed: cli.seed };
    match cli.command {
        Command::Config => commands::cmd_config(),
        Command::World { out, samples } => commands::cmd_world(&global, &out, samples),
        Command::Anonymize { input, out, samples, flags } => {
            commands::cmd_anonymize(&global, &flags, input.as_deref(), &out, samples)
        }
        Command::Sweep { grid, out, samples } => commands::cmd_sweep(&global, grid.as_deref(), &out, samples),
        Command::Ablate { out, samples, flags } => commands::cmd_ablate(&global, &flags, &out, samples),
        Command::Recover { input, out, flags } => commands::cmd_recover(&global, &flags, &input, &out),
        Command::Plot { input, out } => commands::cmd_plot(&input, &out),
        Command::Invert { input, row, out, flags } => commands::cmd_invert(&global, &flags, &input, row, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
