//! The `gaze` command line: synthetic data, staged training, evaluation, field dumps and
//! gradient checks, each driven by one resolved [`config::RunConfig`].

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gaze", version, about = "Gaze-following experiments on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file layered over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and batching.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory [default: $GAZE_OUT_ROOT/<command> or runs/<command>].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one configuration entry, e.g. `train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: annotations plus PNG images.
    GenData,
    /// Run the staged training schedule and write checkpoints and a loss log.
    Train,
    /// Score a checkpoint, or the oracle/center baseline, on a dataset split.
    Eval,
    /// Dump gaze direction fields as CSV grids.
    Field,
    /// Compare analytic and finite-difference gradients of every operation.
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Field => "field",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Resolve the configuration, echo it into the output directory and run the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        config: cli.common.config.clone(),
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        set: cli.common.set.clone(),
    };
    let cfg = RunConfig::resolve(&overrides, cli.command.name())?;
    cfg.echo()?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Field => commands::field(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
    }
}
