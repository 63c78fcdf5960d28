//! Command-line front end: `saecount fit|predict|mse|simulate|diagnose`.

pub mod commands;
pub mod config;
pub mod error;
pub mod logging;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{FitArtifact, FittedModel};
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "saecount",
    version,
    about = "Small area estimation for count outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit GMERF, MERF or the Poisson GLMM on a survey.
    Fit(CommonArgs),
    /// Domain means over a census from a fit artifact.
    Predict(CommonArgs),
    /// Bootstrap MSE of the domain means.
    Mse(CommonArgs),
    /// Model-based or design-based simulation.
    Simulate(CommonArgs),
    /// Pearson residuals, dispersion ratio and Dean's test.
    Diagnose(CommonArgs),
}

#[derive(Debug, Clone, PartialEq, Eq, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `threads`.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Fit(a)
            | Command::Predict(a)
            | Command::Mse(a)
            | Command::Simulate(a)
            | Command::Diagnose(a) => a,
        }
    }
}

/// Loads the config, applies flag overrides and runs the command.
pub fn run(command: &Command) -> Result<(), CliError> {
    let args = command.args();
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(t) = args.threads {
        config.threads = Some(t);
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    config.validate()?;
    let exec = || match command {
        Command::Fit(_) => commands::fit(&config),
        Command::Predict(_) => commands::predict(&config),
        Command::Mse(_) => commands::mse(&config),
        Command::Simulate(_) => commands::simulate(&config),
        Command::Diagnose(_) => commands::diagnose(&config),
    };
    match config.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(exec),
        None => exec(),
    }
}
