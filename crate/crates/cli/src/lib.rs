//! Subcommands of the `mfdl` binary, exposed as a library so tests can run
//! them in-process.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{Outcome, RunContext};

#[derive(Debug, Parser)]
#[command(name = "mfdl", version, about = "Mean-field deep Bayesian network experiments")]
pub struct Cli {
    /// JSON config for the subcommand; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set sweep.restarts=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, env = "MFDL_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads. Outputs do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Covariance heatmap of a trained network's product matrix.
    CovHeatmap,
    /// Mean-field gap (E_W, E_KL) against HMC across depths.
    DepthGap,
    /// Kronecker covariance of A B C against Monte Carlo.
    MvgCheck,
    /// Mean-field network matching a target predictive distribution.
    UatDemo,
    /// Train a mean-field network and save the posterior.
    Train,
    /// Densities of one product-matrix element under an i.i.d. prior.
    PriorDensity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CovHeatmap => "cov-heatmap",
            Command::DepthGap => "depth-gap",
            Command::MvgCheck => "mvg-check",
            Command::UatDemo => "uat-demo",
            Command::Train => "train",
            Command::PriorDensity => "prior-density",
        }
    }
}

fn resolved<T>(cli: &Cli, ctx: &RunContext) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned + Default,
{
    let cfg: T = config::resolve(cli.config.as_deref(), &cli.sets)?;
    ctx.snapshot(cli.command.name(), &cfg)?;
    Ok(cfg)
}

/// Runs one subcommand inside a pool of `cli.jobs` threads.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let ctx = RunContext {
        out: cli.out.clone(),
        seed: cli.seed,
    };
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build()?;
    pool.install(|| match cli.command {
        Command::CovHeatmap => commands::cov_heatmap(&ctx, &resolved(cli, &ctx)?),
        Command::DepthGap => commands::depth_gap(&ctx, &resolved(cli, &ctx)?),
        Command::MvgCheck => commands::mvg_check(&ctx, &resolved(cli, &ctx)?),
        Command::UatDemo => commands::uat_demo(&ctx, &resolved(cli, &ctx)?),
        Command::Train => commands::train(&ctx, &resolved(cli, &ctx)?),
        Command::PriorDensity => commands::prior_density(&ctx, &resolved(cli, &ctx)?),
    })
}
