//! Command-line front end: train, score, eval and similarity.

pub mod artifacts;
pub mod commands;
pub mod error;
pub mod spec;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vtgan_core::data::DatasetKind;

use crate::commands::ScoreOptions;
use crate::error::{CliError, Result};
use crate::spec::{ExperimentSpec, ModelKind, Profile, SimilaritySpec};

#[derive(Debug, Parser)]
#[command(name = "vtgan", version, about = "GAN-based open-set anomaly detection on MNIST-style data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on the known class.
    Train(ExperimentArgs),
    /// Score the known/unknown test set with a trained model.
    Score {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Score only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
        /// Reweight V with this feature weight; the search runs unchanged.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// AUC per scores file plus the results table.
    Eval {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// Copy reconstruction grids here.
        #[arg(long)]
        grids: Option<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Train the metric embedding and list confusable class pairs.
    Similarity {
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON experiment file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model or training regime.
    #[arg(long, value_enum, alias = "regime")]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// Known class, as a digit or a class name.
    #[arg(long)]
    pub known: Option<String>,
    #[arg(long)]
    pub unknown: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Worker threads for per-image scoring and per-tree forest fitting.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn parse_dataset(s: &str) -> Result<DatasetKind> {
    match s {
        "mnist" => Ok(DatasetKind::Mnist),
        "fashion_mnist" | "fashion-mnist" | "fmnist" => Ok(DatasetKind::FashionMnist),
        _ => Err(CliError::Usage(format!("unknown dataset {s:?}"))),
    }
}

fn parse_class(kind: DatasetKind, s: &str) -> Result<u8> {
    kind.parse_class(s).ok_or_else(|| CliError::Usage(format!("unknown {kind} class {s:?}")))
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => {
                let model = self.model.ok_or_else(|| CliError::Usage("--model or --config is required".into()))?;
                let dataset = parse_dataset(&self.dataset)?;
                let known = self.known.as_deref().ok_or_else(|| CliError::Usage("--known is required".into()))?;
                let unknown = self.unknown.as_deref().ok_or_else(|| CliError::Usage("--unknown is required".into()))?;
                ExperimentSpec::new(
                    self.profile,
                    model,
                    dataset,
                    parse_class(dataset, known)?,
                    parse_class(dataset, unknown)?,
                    self.seed.unwrap_or(0),
                )
            }
        };
        if let Some(s) = self.seed {
            spec.set_seed(s);
        }
        if let Some(e) = self.epochs {
            spec.set_epochs(e);
        }
        if let Some(d) = &self.data_dir {
            spec.data_dir = d.clone();
        }
        if let Some(o) = &self.out {
            spec.out_dir = o.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Runs one parsed command, printing its human-readable summary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let spec = args.resolve()?;
            let s = commands::cmd_train(&spec, args.force, args.jobs)?;
            println!("trained {} in {:.1}s: {} steps -> {}", spec.model, s.wall_seconds, s.steps, spec.artifact_dir().display());
        }
        Command::Score { exp, limit, lambda } => {
            let spec = exp.resolve()?;
            let rows = commands::cmd_score(&spec, &ScoreOptions { limit, lambda, jobs: exp.jobs, force: exp.force })?;
            println!("scored {} images -> {}", rows.len(), spec.artifact_dir().join(artifacts::SCORES_FILE).display());
        }
        Command::Eval { scores, grids, table } => {
            let s = commands::cmd_eval(&scores, grids.as_deref())?;
            for (meta, auc) in &s.aucs {
                println!(
                    "{} {}v{} {} seed {}: AUC {:.4} ({} unknown, {} known)",
                    meta.dataset, meta.known, meta.unknown, meta.model, meta.seed, auc.auc, auc.positives, auc.negatives
                );
            }
            match table {
                Some(p) => std::fs::write(&p, &s.table).map_err(CliError::io(&p))?,
                None => print!("{}", s.table),
            }
        }
        Command::Similarity { profile, dataset, seed, epochs, data_dir, out, force } => {
            let kind = parse_dataset(&dataset)?;
            let mut spec = SimilaritySpec::new(profile, kind, seed);
            if let Some(e) = epochs {
                spec.train.epochs = e;
            }
            if let Some(d) = data_dir {
                spec.data_dir = d;
            }
            spec.out_dir = out;
            let s = commands::cmd_similarity(&spec, force)?;
            println!("final metric loss {:.4}", s.final_loss);
            for (a, b, mass) in &s.suggested {
                println!("{} / {}: {mass}", kind.class_name(*a), kind.class_name(*b));
            }
        }
    }
    Ok(())
}
