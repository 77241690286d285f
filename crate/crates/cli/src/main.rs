//! `tvl`: generate trajectories, value them, analyze the mechanism, curate, and run
//! the saddle lab. Artifacts land in a run directory tracked by `manifest.json`.

mod config;
mod error;
mod run;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajval::policy_gradient::VariantKind;

use crate::config::Overrides;
use crate::error::CliError;
use crate::run::Run;

#[derive(Parser)]
#[command(
    name = "tvl",
    version,
    about = "Trajectory valuation lab for policy-gradient LQR"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML (or JSON) run configuration; unspecified fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory [default: runs/<timestamp>-<config hash>].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "TVL_WORKERS")]
    workers: Option<usize>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Start from the full settings (N = 50, M = 2500, H = 100, T = 50) instead of the scaled ones.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Agent variants to value (repeatable or comma separated): vanilla, whitened, npg.
    #[arg(long = "variant", global = true, value_delimiter = ',')]
    variants: Vec<VariantKind>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the trajectory dataset.
    Generate,
    /// Per-trajectory excitation metrics.
    Metrics,
    /// Shapley and leave-one-out values for each agent variant.
    Value,
    /// Mechanism correlations and the stabilization flip.
    Analyze,
    /// Pruning and subset-selection experiments.
    Curate,
    /// Escape-probability sweep over the noise level.
    Saddle,
    /// Every stage in order, skipping stages whose artifacts are intact.
    ReproducePaper,
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let c = cli.common;
    if let Some(n) = c.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let overrides = Overrides {
        config: c.config,
        seed: c.seed,
        paper_scale: c.paper_scale,
        variants: c.variants,
    };
    let mut run = Run::open(c.out, &overrides)?;
    let body = match cli.command {
        Command::Generate => stages::generate(&mut run),
        Command::Metrics => stages::metrics(&mut run),
        Command::Value => stages::value(&mut run),
        Command::Analyze => stages::analyze(&mut run),
        Command::Curate => stages::curate(&mut run),
        Command::Saddle => stages::saddle(&mut run),
        Command::ReproducePaper => stages::reproduce(&mut run),
    }?;
    Ok(format!("{body}\nrun directory: {}", run.dir.display()))
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tvl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
