//! Library side of the `bdctm` command-line tool.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "bdctm", version, about = "Fit and assess Bayesian discrete transformation models")]
pub struct Cli {
    /// Worker threads for chains, folds and simulation cells.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the posterior and write draws, summary, model and manifest.
    Fit(commands::FitArgs),
    /// Predictive CDF and PMF for new rows.
    Predict(commands::PredictArgs),
    /// Proper scores and WAIC of a fit, or k-fold cross-validation.
    Score(commands::ScoreArgs),
    /// Rootogram and randomized quantile residuals.
    Diagnose(commands::DiagnoseArgs),
    /// Count simulation experiment.
    Simulate(commands::SimulateArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(a) => commands::fit(a).map(|m| log::info!("fit finished in {:.1}s", m.timing.elapsed_s)),
        Command::Predict(a) => commands::predict(a).map(|p| log::info!("wrote {}", p.display())),
        Command::Score(a) => commands::score(a).map(|p| log::info!("wrote {}", p.display())),
        Command::Diagnose(a) => commands::diagnose(a).map(|p| log::info!("wrote {}", p.display())),
        Command::Simulate(a) => commands::simulate(a).map(|m| log::info!("simulation finished in {:.1}s", m.timing.elapsed_s)),
    })
}
