//! Pipeline driver behind the `socratic` binary.

pub mod artifacts;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::pipeline::{Pipeline, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "socratic", version, about = "Generate, align and score Socratic debugging questions")]
pub struct Cli {
    /// Pipeline configuration (JSON). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Proceed despite mixed provenance among inputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Answer augmentation requests offline with the rule-based responder.
    #[arg(long, global = true)]
    pub mock: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Convert tagged transcripts into the corpus document.
    Ingest,
    /// Generate invalid questions and grade them for consistency.
    Augment,
    /// Pair kept invalid questions with ground truth.
    BuildPrefs,
    /// Fit the reference policy on the ground-truth questions.
    TrainSft,
    /// Align the reference policy on the preference pairs.
    TrainDpo,
    /// Decode questions for every annotated turn.
    Generate,
    /// Score generations against ground truth.
    Evaluate,
    /// Run every stage in order.
    All,
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let Some(path) = &cli.config else {
        return Err(config::ConfigError("--config <PATH> is required".into()).into());
    };
    let config = PipelineConfig::load(path, cli.seed)?;
    let pipeline = Pipeline::new(config, RunOptions { force: cli.force, mock: cli.mock });
    match cli.command {
        Command::Ingest => pipeline.ingest(),
        Command::Augment => pipeline.augment(),
        Command::BuildPrefs => pipeline.build_prefs(),
        Command::TrainSft => pipeline.train_sft().map(drop),
        Command::TrainDpo => pipeline.train_dpo().map(drop),
        Command::Generate => pipeline.generate(),
        Command::Evaluate => pipeline.evaluate().map(drop),
        Command::All => pipeline.all(),
    }
}
