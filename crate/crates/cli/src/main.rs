//! `crackgnn`: run the crack localization pipeline stage by stage.

mod config;
mod error;
mod manifest;
mod report;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig, Stage};
use crate::error::CliError;
use crate::report::Reporter;
use crate::stages::{summary_path, Context};

#[derive(Parser)]
#[command(name = "crackgnn", version, about = "Strain-based crack localization with a Bayesian graph network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate healthy and cracked surrogate experiments.
    Simulate(Common),
    /// Fit per-channel PCA bases on the healthy experiments.
    FitPca(Common),
    /// Place sensors, contrast readings and build one graph per experiment.
    BuildGraphs(Common),
    /// Train the graph network and keep the best checkpoint.
    Train(Common),
    /// Draw posterior-predictive samples for every experiment.
    Predict(Common),
    /// Score predictions and export per-case CSVs and summary.json.
    Eval(Common),
    /// All stages in order.
    FullRun(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory, overriding the config.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Threads for `simulate` and `build-graphs`.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Train the least-squares model without variational layers.
    #[arg(long)]
    deterministic: bool,
    /// One JSON object per progress line on stderr.
    #[arg(long)]
    json_logs: bool,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

impl Command {
    fn parts(&self) -> (&Common, Vec<Stage>) {
        match self {
            Command::Simulate(c) => (c, vec![Stage::Simulate]),
            Command::FitPca(c) => (c, vec![Stage::FitPca]),
            Command::BuildGraphs(c) => (c, vec![Stage::BuildGraphs]),
            Command::Train(c) => (c, vec![Stage::Train]),
            Command::Predict(c) => (c, vec![Stage::Predict]),
            Command::Eval(c) => (c, vec![Stage::Eval]),
            Command::FullRun(c) => (c, Stage::ALL.to_vec()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, stages) = cli.command.parts();
    if common.workers == 0 {
        return Err(CliError::Config("--workers must be >= 1".into()));
    }
    let overrides = Overrides {
        seed: common.seed,
        deterministic: common.deterministic,
        workdir: common.workdir.clone(),
    };
    let config = RunConfig::load(common.config.as_deref(), &overrides)?;
    let ctx = Context {
        config,
        workers: common.workers,
        report: Reporter {
            json: common.json_logs,
            quiet: common.quiet,
        },
    };
    for &stage in &stages {
        ctx.run(stage)?;
    }
    if stages.contains(&Stage::Eval) {
        println!("{}", summary_path(&ctx.config.workdir, &ctx.config.run_id).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
