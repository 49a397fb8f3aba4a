//! `ensemble-cf`: simulate a sensor network, train virtual sensors, detect
//! faults and explain alarms with ensemble-consistent counterfactuals.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::RunContext;
use config::RunConfig;

const DEFAULT_OUT: &str = "ensemble-cf-out";

#[derive(Debug, Parser)]
#[command(name = "ensemble-cf", version, about)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Restrict the run to one network seed.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,

    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true, value_name = "DIR", env = "ENSEMBLE_CF_OUT")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate clean panels and faulty scenario panels.
    Simulate,
    /// Fit virtual sensors and calibrate the alarm threshold.
    Train,
    /// Run the detector on every scenario.
    Detect,
    /// Explain one alarm step of one scenario.
    Explain {
        #[arg(long, value_name = "ID")]
        scenario: String,
        /// Alarm step; defaults to the first alarm after the training prefix.
        #[arg(long, value_name = "T")]
        step: Option<usize>,
        /// Also write the per-model explanations.
        #[arg(long)]
        baseline: bool,
    },
    /// Localize every scenario with both methods.
    Evaluate,
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut settings = config.settings()?;
    if let Some(seed) = cli.seed {
        settings.seeds = vec![seed];
    }
    let out = cli
        .out
        .or(config.output_dir)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = RunContext { settings, out };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Detect => commands::detect(&ctx),
        Command::Explain {
            scenario,
            step,
            baseline,
        } => commands::explain(&ctx, &scenario, step, baseline),
        Command::Evaluate => commands::evaluate(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
