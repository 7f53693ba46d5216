//! `pokerlab`: corpus generation, training, probing, belief checks and
//! activation projections.
//!
//! Exit codes: 0 on success, 1 on a validation or tolerance failure or any
//! runtime error, 2 on a usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Outcome, UsageError};
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "pokerlab",
    version,
    about = "Synthetic hold'em corpora, masked-token transformers and activation probes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (also sets the model, training and probe seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run sequentially on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a six-player hand corpus with a train/test split.
    Generate {
        #[arg(long)]
        hands: Option<usize>,
        /// Monte-Carlo rollouts per agent decision.
        #[arg(long)]
        rollouts: Option<u64>,
        #[arg(long)]
        split_ratio: Option<f64>,
    },
    /// Train the transformer on a corpus.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from `<out>/last.bin`.
        #[arg(long)]
        resume: bool,
    },
    /// Fit linear and MLP probes on a trained checkpoint.
    Probe {
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Verify the belief-state linearity identity and the coin LLR recurrence.
    BeliefCheck {
        /// Also train the coin-task model and probe it.
        #[arg(long)]
        coin: bool,
        /// JSON file with a FinitePomdp replacing the built-in instance.
        #[arg(long)]
        pomdp: Option<PathBuf>,
        #[arg(long)]
        max_history: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Write PCA projections of probe-position activations.
    Project {
        #[command(flatten)]
        probe: ProbeArgs,
        /// Cap on the number of projected samples.
        #[arg(long, default_value_t = 2000)]
        max_samples: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ProbeArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// handrank, action or equity.
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated layer indices, or a range such as 0..4.
    #[arg(long)]
    layers: Option<String>,
    /// Number of probe seeds (seeds 0..n).
    #[arg(long)]
    probe_seeds: Option<u64>,
    #[arg(long)]
    percentile: Option<f64>,
    /// Monte-Carlo rollouts for equity labels.
    #[arg(long)]
    rollouts: Option<u64>,
    #[arg(long)]
    max_train: Option<usize>,
    #[arg(long)]
    max_test: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let common = cli.common;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    commands::apply_common(&mut cfg, &common);
    match cli.command {
        Command::Generate { hands, rollouts, split_ratio } => {
            commands::generate(cfg, &common, hands, rollouts, split_ratio)
        }
        Command::Train { corpus, epochs, lr, max_steps, resume } => {
            commands::train(cfg, &common, corpus, epochs, lr, max_steps, resume)
        }
        Command::Probe { probe } => commands::probe(cfg, &common, &probe),
        Command::BeliefCheck { coin, pomdp, max_history, horizon } => {
            commands::belief_check(cfg, &common, coin, pomdp, max_history, horizon)
        }
        Command::Project { probe, max_samples } => commands::project(cfg, &common, &probe, max_samples),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::ToleranceFailure) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
