//! Experiment driver: configuration, seeded trials, aggregation and output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "spiked",
    version,
    about = "Bayes-optimal limits and TAP experiments for spiked matrices with structured noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory, overriding `outputs` in the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for concurrent trials; defaults to available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Base seed, overriding `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Replica phase curve (MMSE, mutual information, surrogate SNR).
    ReplicaCurve,
    /// Seeded TAP trials with per-trial and aggregate CSV output.
    TapRun,
    /// State-evolution fixed point against the replica saddle point.
    OampCheck,
    /// TAP on the structured model and on its Gaussian surrogate.
    SurrogateCompare,
    /// Smooth an empirical eigenvalue list and tabulate V', J and the phase curve.
    SpectrumIngest {
        /// Eigenvalue file, overriding the configured noise path.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Number of largest-magnitude eigenvalues to drop.
        #[arg(long)]
        outliers: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ReplicaCurve => "replica-curve",
            Command::TapRun => "tap-run",
            Command::OampCheck => "oamp-check",
            Command::SurrogateCompare => "surrogate-compare",
            Command::SpectrumIngest { .. } => "spectrum-ingest",
        }
    }
}

/// Loads the configuration, applies flag overrides and runs the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("missing --config <path>".into()))?;
    let mut exp = config::load_config(path)?;
    if let Some(out) = &cli.out {
        exp.outputs = out.clone();
    }
    if let Some(seed) = cli.seed {
        exp.seed = seed;
    }
    if let Command::SpectrumIngest { input, outliers } = &cli.command {
        match (&mut exp.noise, input) {
            (config::NoiseSpec::Eigenvalues { path, outliers: k }, _) => {
                if let Some(p) = input {
                    *path = p.clone();
                }
                if let Some(o) = outliers {
                    *k = *o;
                }
            }
            (_, Some(p)) => {
                exp.noise = config::NoiseSpec::Eigenvalues {
                    path: p.clone(),
                    outliers: outliers.unwrap_or(0),
                }
            }
            (_, None) => {}
        }
    }
    let workers = cli.workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(usize::from)
            .unwrap_or(1)
    });
    if workers == 0 {
        return Err(CliError::Validation("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    let start = Instant::now();
    let mut manifest = output::Manifest::new(cli.command.name(), &exp)?;
    pool.install(|| -> Result<(), CliError> {
        match &cli.command {
            Command::ReplicaCurve => commands::cmd_replica_curve(&exp, &mut manifest),
            Command::TapRun => commands::cmd_tap_run(&exp, &mut manifest).map(|_| ()),
            Command::OampCheck => commands::cmd_oamp_check(&exp, &mut manifest).map(|_| ()),
            Command::SurrogateCompare => {
                commands::cmd_surrogate_compare(&exp, &mut manifest).map(|_| ())
            }
            Command::SpectrumIngest { .. } => commands::cmd_spectrum_ingest(&exp, &mut manifest),
        }
    })?;
    manifest.finish(start.elapsed(), workers)?;
    Ok(())
}
