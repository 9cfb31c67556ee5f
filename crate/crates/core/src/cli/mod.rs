//! Command-line front end tying the pipeline together.

pub mod commands;
pub mod config;
pub mod toy;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    cmd_calibrate, cmd_eval, cmd_extract, cmd_fuse, cmd_score, cmd_train, CalibrateOptions, EvalOptions, EvalReport,
    ScoreOptions, Stage,
};
pub use config::ExperimentConfig;

use crate::blocks::Variant;
use crate::error::{Error, Result};
use crate::scoring::QualityMeasure;
use toy::{write_toy_dataset, ToyDatasetConfig};

#[derive(Debug, Parser)]
#[command(name = "freqsv", version, about = "Speaker verification pipeline on frequency-aware embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Base,
    Lmft,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trains a model from a labelled utterance list.
    Train {
        #[command(flatten)]
        common: Common,
        /// Utterance list; falls back to `train_list` of the configuration.
        #[arg(long)]
        list: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "base")]
        stage: StageArg,
        /// Variant used when no configuration is given.
        #[arg(long, default_value = "ecapa_tdnn")]
        variant: Variant,
    },
    /// Writes embeddings of every listed utterance to an archive.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        list: PathBuf,
    },
    /// Scores a trial list with cosine similarity.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        enroll: Option<PathBuf>,
        /// Enables s-norm with this many top cohort scores per side.
        #[arg(long)]
        snorm: Option<usize>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        cohort_embeddings: Option<PathBuf>,
        /// Also writes per-trial quality information here.
        #[arg(long)]
        quality_out: Option<PathBuf>,
        #[arg(long)]
        language_backend: Option<PathBuf>,
    },
    /// Trains a quality-aware calibration model.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        quality: Option<PathBuf>,
        /// Comma-separated quality measures; `none` for plain calibration.
        #[arg(long)]
        measures: Option<String>,
        #[arg(long)]
        prior: Option<f64>,
    },
    /// Weighted average of aligned score files.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
        /// Comma-separated weights summing to one.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
    },
    /// Computes EER and minimum detection costs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        quality: Option<PathBuf>,
    },
    /// Generates the synthetic labelled corpus.
    ToyDataset {
        #[command(flatten)]
        common: Common,
    },
}

fn experiment(common: &Common, variant: Variant) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(variant),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_measures(text: &str) -> Result<Vec<QualityMeasure>> {
    if text == "none" || text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(|s| s.trim().parse()).collect()
}

/// Runs one parsed command and returns the text printed on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { common, list, stage, variant } => {
            let cfg = experiment(&common, variant)?;
            let list = list
                .or_else(|| cfg.train_list.clone())
                .ok_or_else(|| Error::Config("no training list given".into()))?;
            let stage = match stage {
                StageArg::Base => Stage::Base,
                StageArg::Lmft => Stage::Lmft,
            };
            let report = cmd_train(&cfg, &list, &common.out, stage)?;
            Ok(format!(
                "{} iterations, training accuracy {}",
                report.iterations,
                report.final_accuracy().map_or("n/a".into(), |a| format!("{a:.4}"))
            ))
        }
        Command::Extract { common, model, list } => {
            let cfg = experiment(&common, Variant::EcapaTdnn)?;
            let summary = cmd_extract(&model, &list, &common.out, &cfg.features)?;
            Ok(format!("{} embeddings", summary.extracted))
        }
        Command::Score {
            common,
            embeddings,
            trials,
            enroll,
            snorm,
            cohort,
            cohort_embeddings,
            quality_out,
            language_backend,
        } => {
            let opts = ScoreOptions {
                embeddings,
                trials,
                enroll,
                cohort,
                cohort_embeddings,
                snorm_top_k: snorm,
                quality_out,
                language_backend,
            };
            let scores = cmd_score(&opts, &common.out)?;
            Ok(format!("{} trials scored", scores.len()))
        }
        Command::Calibrate { common, scores, trials, quality, measures, prior } => {
            let cfg = experiment(&common, Variant::EcapaTdnn)?;
            let measures = match measures {
                Some(m) => parse_measures(&m)?,
                None => cfg.scoring.quality_measures.clone(),
            };
            let opts = CalibrateOptions {
                scores,
                trials,
                quality,
                measures,
                prior: prior.unwrap_or(cfg.scoring.prior),
                min_duration_s: cfg.scoring.min_duration_s,
            };
            let model = cmd_calibrate(&opts, &common.out)?;
            Ok(format!("calibration objective {}", model.objective))
        }
        Command::Fuse { common, scores, weights } => {
            let cfg = experiment(&common, Variant::EcapaTdnn)?;
            let weights = if weights.is_empty() { cfg.scoring.fusion_weights.clone() } else { weights };
            let fused = cmd_fuse(&scores, &weights, &common.out)?;
            Ok(format!("{} trials fused", fused.len()))
        }
        Command::Eval { common, scores, trials, calibration, quality } => {
            let cfg = experiment(&common, Variant::EcapaTdnn)?;
            let opts = EvalOptions {
                scores,
                trials,
                calibration,
                quality,
                min_duration_s: cfg.scoring.min_duration_s,
            };
            Ok(cmd_eval(&opts, &common.out)?.to_text())
        }
        Command::ToyDataset { common } => {
            let toy_cfg = match &common.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => ToyDatasetConfig::default(),
            };
            let splits = write_toy_dataset(&common.out, &toy_cfg, common.seed.unwrap_or(1), true)?;
            let n: usize = splits.iter().map(|s| s.utterances.len()).sum();
            Ok(format!("{n} utterances written to {}", common.out.display()))
        }
    }
}
