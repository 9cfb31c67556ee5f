//! Experiment configuration shared by the pipeline commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{NetworkConfig, Variant};
use crate::error::{Error, Result};
use crate::loss::AamConfig;
use crate::scoring::calibration::DEFAULT_PRIOR;
use crate::scoring::qm::DEFAULT_MIN_DURATION_S;
use crate::scoring::QualityMeasure;
use crate::train::{CyclicalLr, FineTuneConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Draw pools balanced across domains instead of plain shuffling.
    pub domain_balanced: bool,
    pub in_domain: String,
    /// Speakers taken from each out-of-domain set per pool.
    pub balance_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub finetune: FineTuneConfig,
    pub finetune_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub snorm_top_k: usize,
    pub quality_measures: Vec<QualityMeasure>,
    pub prior: f64,
    pub min_duration_s: f64,
    pub fusion_weights: Vec<f64>,
    /// Nontarget trials may pair speakers of different gender.
    pub cross_gender: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub preset: Preset,
    pub seed: u64,
    pub train_list: Option<PathBuf>,
    pub features: FeatureConfig,
    pub network: NetworkConfig,
    pub aam: AamConfig,
    pub train: TrainConfig,
    pub stages: StageConfig,
    pub sampler: SamplerConfig,
    pub scoring: ScoringConfig,
}

impl ExperimentConfig {
    /// Desk-scale recipe that overfits the synthetic training set quickly.
    pub fn toy(variant: Variant) -> Self {
        let n_mels = 40;
        ExperimentConfig {
            variant,
            preset: Preset::Toy,
            seed: 1,
            train_list: None,
            features: FeatureConfig { n_mels, win_ms: 25.0, hop_ms: 10.0 },
            network: NetworkConfig::toy(variant).with_n_mels(n_mels),
            aam: AamConfig {
                sub_centers: if variant.is_resnet() { 2 } else { 1 },
                ..AamConfig::default()
            },
            train: TrainConfig {
                batch_size: 8,
                max_iterations: 2000,
                schedule: CyclicalLr { lr_min: 1e-8, lr_max: 1e-3, cycle_len: 400 },
                crop_s: 0.5,
                spec_augment: None,
                eval_every: 25,
                target_accuracy: Some(0.95),
                ..TrainConfig::default()
            },
            stages: StageConfig {
                finetune: FineTuneConfig { crop_s: 1.0, margin: 0.3 },
                finetune_iterations: 50,
            },
            sampler: SamplerConfig {
                domain_balanced: false,
                in_domain: "deepmine".into(),
                balance_count: 4,
            },
            scoring: ScoringConfig {
                snorm_top_k: 50,
                quality_measures: QualityMeasure::ALL.to_vec(),
                prior: DEFAULT_PRIOR,
                min_duration_s: DEFAULT_MIN_DURATION_S,
                fusion_weights: Vec::new(),
                cross_gender: true,
            },
        }
    }

    /// Paper-scale recipe.
    pub fn full(variant: Variant) -> Self {
        let base = ExperimentConfig::toy(variant);
        ExperimentConfig {
            preset: Preset::Full,
            features: FeatureConfig { n_mels: 80, ..base.features },
            network: NetworkConfig::full(variant),
            aam: AamConfig {
                sub_centers: 1,
                ..AamConfig::default()
            },
            train: TrainConfig::default(),
            stages: StageConfig {
                finetune: FineTuneConfig::default(),
                finetune_iterations: 20_000,
            },
            sampler: SamplerConfig {
                domain_balanced: true,
                in_domain: "deepmine".into(),
                balance_count: 1000,
            },
            scoring: ScoringConfig { snorm_top_k: 2000, ..base.scoring },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.variant != self.variant {
            return Err(Error::Config(format!(
                "network variant {} differs from experiment variant {}",
                self.network.variant.name(),
                self.variant.name()
            )));
        }
        if self.network.n_mels != self.features.n_mels {
            return Err(Error::Config(format!(
                "network expects {} mel bins, features produce {}",
                self.network.n_mels, self.features.n_mels
            )));
        }
        if !(self.features.win_ms > 0.0 && self.features.hop_ms > 0.0) {
            return Err(Error::Config("feature window and hop must be positive".into()));
        }
        if self.scoring.snorm_top_k == 0 || !(self.scoring.prior > 0.0 && self.scoring.prior < 1.0) {
            return Err(Error::Config("s-norm K must be positive and the prior inside (0, 1)".into()));
        }
        if self.stages.finetune_iterations == 0 {
            return Err(Error::Config("fine-tuning needs at least one iteration".into()));
        }
        self.network.validate()?;
        self.aam.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_and_validate() {
        for v in Variant::ALL {
            for cfg in [ExperimentConfig::toy(v), ExperimentConfig::full(v)] {
                cfg.validate().unwrap();
                let text = cfg.to_toml().unwrap();
                assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn unknown_keys_and_inconsistencies_are_rejected() {
        let text = ExperimentConfig::toy(Variant::SeResnet).to_toml().unwrap();
        let extra = format!("colour = \"blue\"\n{text}");
        assert!(matches!(ExperimentConfig::from_toml(&extra), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::toy(Variant::SeResnet);
        cfg.features.n_mels = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::toy(Variant::SeResnet);
        cfg.variant = Variant::EcapaTdnn;
        assert!(cfg.validate().is_err());
    }
}
