use std::path::PathBuf;

use clap::{Parser, Subcommand};

use formed_core::data::Split;

use crate::commands::{self, AdaptArgs};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::parallel;

#[derive(Debug, Parser)]
#[command(name = "formed", version, about = "Repurpose a frozen time-series backbone for classification")]
pub struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic datasets described by `[synth]`.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a backbone on forecasting and save it.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the shared decoder and cohort task parameters.
    Repurpose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a new dataset's task parameters with everything else frozen.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Training-data ratios for a few-shot curve.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a registered dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute deltas, summaries and plots from the CSV files in a run directory.
    Report { dir: PathBuf },
}

pub fn run(cli: Cli) -> Result<()> {
    parallel::init_threads(cli.threads)?;
    match cli.command {
        Command::Synth { config, out } => commands::cmd_synth(&RunConfig::load(&config)?, out),
        Command::Pretrain { config, out } => commands::cmd_pretrain(&RunConfig::load(&config)?, out),
        Command::Repurpose { config, ckpt, seeds, out } => {
            commands::cmd_repurpose(&RunConfig::load(&config)?, &ckpt, seeds, out)
        }
        Command::Adapt { config, ckpt, dataset, ratios, seeds, out } => {
            commands::cmd_adapt(&RunConfig::load(&config)?, &ckpt, AdaptArgs { dataset, ratios, seeds, out })
        }
        Command::Eval { config, ckpt, dataset, split, out } => {
            let split = Split::parse(&split)
                .ok_or_else(|| CliError::Config(format!("unknown split `{split}` (train, val or test)")))?;
            commands::cmd_eval(&RunConfig::load(&config)?, &ckpt, &dataset, split, out)
        }
        Command::Report { dir } => commands::cmd_report(&dir),
    }
}
