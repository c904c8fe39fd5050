//! Command-line pipeline: classifier → surrogate → explainer → evaluation.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{CliResult, Context};

#[derive(Debug, Parser)]
#[command(name = "alterfactual", version, about = "Train and evaluate alterfactual and counterfactual explainers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `gan.seed`; seeds every stage of the pipeline.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `run_dir`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the binary classifier and record its test accuracy.
    TrainClassifier(Common),
    /// Fit the linear SVM surrogate on penultimate features of the train split.
    FitSvm(Common),
    /// Train the explainer GAN in `gan.mode`.
    TrainExplainer(Common),
    /// Explain the configured split and write report.json / report.csv.
    Evaluate(Common),
    /// Write an explanation grid and per-sample interpolation strips.
    Render {
        #[command(flatten)]
        common: Common,
        /// Explainer checkpoint; defaults to the run's `explainer_<mode>.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Indices into the evaluation split.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        inputs: Vec<usize>,
        /// Frames per interpolation strip, endpoints included.
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = |c: &Common| Context::new(&c.config, c.seed, c.run_dir.clone());
    match cli.command {
        Command::TrainClassifier(c) => commands::train_classifier_cmd(&ctx(&c)?),
        Command::FitSvm(c) => commands::fit_svm_cmd(&ctx(&c)?),
        Command::TrainExplainer(c) => commands::train_explainer_cmd(&ctx(&c)?),
        Command::Evaluate(c) => commands::evaluate_cmd(&ctx(&c)?),
        Command::Render { common, checkpoint, inputs, steps } => {
            commands::render_cmd(&ctx(&common)?, checkpoint, &inputs, steps)
        }
    }
}
