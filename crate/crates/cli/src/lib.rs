//! The `soars` experiment harness.

pub mod commands;
pub mod config;
pub mod data;
pub mod dose_gen;
pub mod error;
pub mod manifest;
pub mod parallel;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{EvalDoseArgs, EvalSegArgs, PredictArgs, SearchArgs, TrainArgs};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "soars", version, about = "Stratified organ-at-risk segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set training.anchor.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded phantom dataset with dose plans.
    PhantomGen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the op of every block of one branch; writes arch.json.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        branch: String,
        #[arg(long)]
        out: PathBuf,
        /// Trained anchor model for the mid_level and detector branches.
        #[arg(long)]
        anchor: Option<PathBuf>,
    },
    /// Train one branch with a fixed architecture.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        branch: String,
        /// Searched architecture; plain 3x3x3 convolutions when omitted.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        anchor: Option<PathBuf>,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Segment every case with a trained pipeline.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset split to predict (train, val, test or all).
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score prediction sets against reference masks.
    EvalSeg {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One or more `[name=]DIR`, comma separated; the first two are compared.
        #[arg(long)]
        pred: String,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Dose statistics of substitute contours under the reference plan.
    EvalDose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dose_dir: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// `[name=]DIR[,...]`.
        #[arg(long)]
        sets: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render a report as CSV or Markdown.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen { cfg, out } => commands::phantom_gen(&cfg.load()?, &out),
        Command::Search { cfg, data, branch, out, anchor } => commands::search(
            &cfg.load()?,
            SearchArgs { data: &data, branch: &branch, out: &out, anchor: anchor.as_deref() },
        ),
        Command::Train { cfg, data, branch, arch, out, anchor, resume } => commands::train(
            &cfg.load()?,
            TrainArgs { data: &data, branch: &branch, arch: arch.as_deref(), out: &out, anchor: anchor.as_deref(), resume },
        ),
        Command::Predict { cfg, pipeline, cases, out, split, jobs } => {
            let split = data::parse_split(&split)?;
            commands::predict(&cfg.load()?, PredictArgs { pipeline: &pipeline, cases: &cases, out: &out, split, jobs })
        }
        Command::EvalSeg { cfg, pred, reference, out, jobs } => {
            commands::eval_seg(&cfg.load()?, EvalSegArgs { pred: &pred, reference: &reference, out: &out, jobs }).map(drop)
        }
        Command::EvalDose { cfg, dose_dir, reference, sets, out, jobs } => commands::eval_dose(
            &cfg.load()?,
            EvalDoseArgs { dose_dir: &dose_dir, reference: &reference, sets: &sets, out: &out, jobs },
        )
        .map(drop),
        Command::Report { input, format, out } => {
            let f = report::Format::parse(&format)?;
            let text = report::render(&report::load(&input)?, f);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            std::fs::write(&out, text).map_err(|e| CliError::io(&out, e))
        }
    }
}
