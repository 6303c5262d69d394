//! Experiment driver behind the `afs-lab` binary.

pub mod analysis;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::commands::Session;
use crate::config::Experiment;
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Write the dataset and its ground truth.
    Simulate,
    /// Map the area of feasible solutions.
    Afs,
    /// L_x surfaces, exponent sweep frames and the summary.
    Norms,
    /// MCR-ALS over the penalty ladder.
    Mcr,
    /// Everything above into one directory.
    All,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "afs-lab", version, about = "Feasible-area maps, L_x-norm surfaces and sparse MCR-ALS on simulated LC/GC-MS data")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for grid evaluation.
    #[arg(long, env = "AFS_LAB_THREADS")]
    pub threads: Option<usize>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut exp = Experiment::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        exp.config.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| exp.config.output_dir.clone());
    match cli.threads {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
            pool.install(|| execute(cli.command, exp, out))
        }
        None => execute(cli.command, exp, out),
    }
}

pub fn execute(command: Command, exp: Experiment, out: PathBuf) -> CliResult<()> {
    let mut s = Session::new(exp, out)?;
    match command {
        Command::Simulate => commands::simulate(&mut s),
        Command::Afs => commands::afs(&mut s),
        Command::Norms => commands::norms(&mut s),
        Command::Mcr => commands::mcr(&mut s),
        Command::All => {
            commands::simulate(&mut s)?;
            commands::afs(&mut s)?;
            commands::norms(&mut s)?;
            commands::mcr(&mut s)
        }
    }
}
