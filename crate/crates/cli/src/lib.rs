//! fsnas: drive few-shot architecture search experiments from one JSON
//! config. Subcommands build on each other through the output directory:
//! train-oracle and train-tree produce the tables and checkpoints that
//! eval-corr, search, retrain, and report consume.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{Algo, Ctx};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "fsnas",
    version,
    about = "Few-shot neural architecture search harness"
)]
struct Cli {
    /// JSON experiment config (default: ./config.json when present).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (overrides FSNAS_OUT and the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the invoked command's primary seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for oracle training.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print edge and architecture counts of the configured space.
    GenSpace,
    /// Train every architecture from scratch into oracle.csv (resumable).
    TrainOracle,
    /// Run the split-and-transfer pipeline; checkpoint the tree.
    TrainTree,
    /// Rank-correlate every tree level against the oracle table.
    EvalCorr,
    /// Run an architecture search against the best available evaluator.
    Search {
        /// random | rea | reinforce | gradient (default: config).
        #[arg(long, value_enum)]
        algo: Option<Algo>,
    },
    /// Retrain the top K of the last trace from scratch; print the winner.
    Retrain {
        /// How many candidates to retrain (default: config).
        #[arg(long, value_name = "K")]
        k: Option<usize>,
    },
    /// Summarize the CSV artifacts in the output directory.
    Report,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let default_path = PathBuf::from("config.json");
            if default_path.exists() {
                ExperimentConfig::load(&default_path)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    if cli.jobs == 0 {
        anyhow::bail!("--jobs must be at least 1");
    }

    let out = cli
        .out
        .or_else(|| std::env::var_os("FSNAS_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&config.output.directory));

    let ctx = Ctx {
        config,
        out,
        seed: cli.seed,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::GenSpace => commands::gen_space(&ctx),
        Command::TrainOracle => commands::train_oracle_cmd(&ctx),
        Command::TrainTree => commands::train_tree(&ctx),
        Command::EvalCorr => commands::eval_corr(&ctx),
        Command::Search { algo } => commands::search(&ctx, algo),
        Command::Retrain { k } => commands::retrain(&ctx, k),
        Command::Report => commands::report(&ctx),
    }
}
