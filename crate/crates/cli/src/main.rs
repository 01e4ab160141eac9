mod config;
mod experiments;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{FpsolveCfg, Job, MetricsCfg, OracleCfg, RunConfig, SampleCfg, SweepCfg, TrainCfg};

/// Usage errors (bad flags, bad config) exit with 2; failures while running exit with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "difflab", version, about = "Diffusion-coefficient experiments with reproducible run directories")]
struct Cli {
    /// Parent directory of `<timestamp>-<hash>/` run folders.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-form KL and L for the 1D Gaussian.
    Oracle(OracleCfg),
    /// Fokker-Planck estimate of L.
    Fpsolve(FpsolveCfg),
    /// L and KL over an h^2 grid, with decay and plateau fits.
    Sweep(SweepCfg),
    /// Reverse-time sampling with an exact or trained score.
    Sample(SampleCfg),
    /// Denoising score matching.
    Train(TrainCfg),
    /// KL, JS and W1 between two sample files.
    Metrics(MetricsCfg),
    /// Run a config file (or re-run a manifest).
    Run {
        config: PathBuf,
    },
}

fn init_threads() -> Result<usize, CliError> {
    let n = match std::env::var("LAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| CliError::Usage(format!("LAB_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Run(e.to_string()))?;
    Ok(rayon::current_num_threads())
}

fn real_main() -> Result<(), CliError> {
    let cli = Cli::parse();
    let job = match cli.cmd {
        Cmd::Oracle(c) => Job::Oracle(c),
        Cmd::Fpsolve(c) => Job::Fpsolve(c),
        Cmd::Sweep(c) => Job::Sweep(c),
        Cmd::Sample(c) => Job::Sample(c),
        Cmd::Train(c) => Job::Train(c),
        Cmd::Metrics(c) => Job::Metrics(c),
        Cmd::Run { config } => RunConfig::load(&config)?,
    };
    job.validate()?;
    let threads = init_threads()?;
    let dir = manifest::run(&job, &cli.runs_dir, threads)?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("difflab: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Run(_) => 1,
            })
        }
    }
}
