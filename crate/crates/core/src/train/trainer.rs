//! The training loop, its data container and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, DecayGroups};
use super::sampler::{BatchSampler, Domain, Sample};
use super::schedule::CyclicalLr;
use crate::blocks::{Ctx, Network, NetworkConfig, ParamStore};
use crate::error::{Error, Result};
use crate::features::{crop_at, crop_frames, random_crop, spec_augment, FeatureMatrix};
use crate::loss::{AamConfig, AamHead};
use crate::tensor::{Tape, Tensor};

/// Network, classification head and their shared weights.
#[derive(Clone, Debug)]
pub struct SpeakerModel {
    pub net: Network,
    pub head: AamHead,
    pub store: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub speakers: usize,
    pub aam: AamConfig,
    pub network: NetworkConfig,
}

pub const NETWORK_FILE: &str = "network.toml";
pub const WEIGHTS_STEM: &str = "weights";

impl SpeakerModel {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::new(spec.network.clone(), &mut store, &mut rng)?;
        let head = AamHead::new(&mut store, &mut rng, spec.speakers, spec.network.embedding_dim, spec.aam)?;
        Ok(SpeakerModel { net, head, store })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            speakers: self.head.speakers,
            aam: self.head.cfg,
            network: self.net.config().clone(),
        }
    }

    /// Version tag written into the weight manifest.
    pub fn version(&self) -> String {
        self.net.config().hash()
    }

    /// Writes `network.toml` and the `weights.manifest` / `weights.bin` pair.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(&self.spec()).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(NETWORK_FILE), text)?;
        self.store.save(&dir.join(WEIGHTS_STEM), &self.version())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(NETWORK_FILE))
            .map_err(|e| Error::Config(format!("no checkpoint at {}: {e}", dir.display())))?;
        let spec: ModelSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("bad {NETWORK_FILE}: {e}")))?;
        let mut model = SpeakerModel::new(&spec, 0)?;
        let version = model.version();
        model.store.load(&dir.join(WEIGHTS_STEM), &version)?;
        Ok(model)
    }
}

/// Precomputed features of the training utterances.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub features: Vec<FeatureMatrix>,
    pub labels: Vec<usize>,
    pub domains: Vec<String>,
    pub speakers: usize,
}

impl TrainingSet {
    pub fn new(features: Vec<FeatureMatrix>, labels: Vec<usize>, domains: Vec<String>) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() || features.len() != domains.len() {
            return Err(Error::Input(format!(
                "training set with {} features, {} labels and {} domains",
                features.len(),
                labels.len(),
                domains.len()
            )));
        }
        let speakers = labels.iter().max().map_or(0, |m| m + 1);
        Ok(TrainingSet {
            features,
            labels,
            domains,
            speakers,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.labels.iter().copied().enumerate().collect()
    }

    /// Groups utterances by domain and speaker for the balanced sampler.
    pub fn balanced_domains(&self, in_domain: &str) -> Vec<Domain> {
        let mut by_domain: BTreeMap<&str, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (i, (&label, domain)) in self.labels.iter().zip(&self.domains).enumerate() {
            by_domain.entry(domain).or_default().entry(label).or_default().push(i);
        }
        by_domain
            .into_iter()
            .map(|(id, speakers)| Domain {
                id: id.to_string(),
                speakers,
                in_domain: id == in_domain,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub max_freq_mask: usize,
    pub max_time_mask: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub schedule: CyclicalLr,
    pub decay: DecayGroups,
    pub crop_s: f64,
    pub spec_augment: Option<SpecAugmentConfig>,
    /// Full training-set accuracy is measured every this many iterations.
    pub eval_every: usize,
    /// Training stops once the measured accuracy exceeds this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_iterations: 3 * 130_000,
            schedule: CyclicalLr::default(),
            decay: DecayGroups::default(),
            crop_s: 2.0,
            spec_augment: Some(SpecAugmentConfig {
                max_freq_mask: 8,
                max_time_mask: 10,
            }),
            eval_every: 1000,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.decay.validate()?;
        if self.batch_size == 0 || self.max_iterations == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size, iterations and eval interval must be positive".into()));
        }
        if !(self.crop_s > 0.0) {
            return Err(Error::Config(format!("crop duration {} must be positive", self.crop_s)));
        }
        Ok(())
    }
}

/// Overrides of the large-margin fine-tuning stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    pub crop_s: f64,
    pub margin: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            crop_s: 3.0,
            margin: 0.3,
        }
    }
}

impl FineTuneConfig {
    pub fn apply(&self, cfg: &mut TrainConfig, model: &mut SpeakerModel) -> Result<()> {
        if !(self.crop_s > 0.0) {
            return Err(Error::Config(format!("fine-tune crop {} must be positive", self.crop_s)));
        }
        let aam = AamConfig {
            margin: self.margin,
            ..model.head.cfg
        };
        aam.validate()?;
        model.head.cfg = aam;
        cfg.crop_s = self.crop_s;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub batch_accuracy: Vec<f64>,
    /// `(iteration, accuracy)` of every full training-set evaluation.
    pub evaluations: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evaluations.last().map(|e| e.1)
    }
}

fn stack(crops: &[FeatureMatrix]) -> Result<Tensor> {
    let (f, t) = (crops[0].n_mels(), crops[0].frames());
    let mut data = Vec::with_capacity(crops.len() * f * t);
    for c in crops {
        data.extend_from_slice(c.values().data());
    }
    Tensor::new(&[crops.len(), f, t], data)
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Accuracy of cosine-argmax predictions on the first `crop_s` seconds of
/// every training utterance, with inference-mode statistics.
pub fn training_accuracy(model: &mut SpeakerModel, data: &TrainingSet, crop_s: f64, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let crops: Vec<FeatureMatrix> = chunk
            .iter()
            .map(|&i| {
                let f = &data.features[i];
                crop_at(f, 0, crop_frames(crop_s, f.hop_ms()).max(1))
            })
            .collect();
        let x = stack(&crops)?;
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut model.store, false);
        let emb = model.net.forward(&mut ctx, tape.constant(x))?;
        let cos = model.head.cosines(&mut ctx, emb)?.value();
        let s = model.head.speakers;
        for (row, &i) in cos.data().chunks(s).zip(chunk) {
            correct += usize::from(argmax(row) == data.labels[i]);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs the optimization loop, appending `iter loss lr acc` per iteration to
/// `log` and saving a checkpoint under `checkpoints` every half cycle.
pub fn train_loop<S: BatchSampler>(
    model: &mut SpeakerModel,
    data: &TrainingSet,
    cfg: &TrainConfig,
    sampler: &mut S,
    rng: &mut ChaCha8Rng,
    log: &mut dyn Write,
    checkpoints: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.speakers > model.head.speakers {
        return Err(Error::Config(format!(
            "{} training speakers for a head of {}",
            data.speakers, model.head.speakers
        )));
    }
    let mut adam = Adam::new(&model.store, cfg.decay);
    let mut report = TrainReport::default();
    let half = cfg.schedule.half_cycle();
    for it in 0..cfg.max_iterations {
        let lr = cfg.schedule.lr_at(it);
        let batch = sampler.next_batch(cfg.batch_size, rng);
        let mut crops = Vec::with_capacity(batch.len());
        for &(utt, _) in &batch {
            let mut c = random_crop(&data.features[utt], cfg.crop_s, rng)?;
            if let Some(sa) = cfg.spec_augment {
                c = spec_augment(&c, sa.max_freq_mask.min(c.n_mels()), sa.max_time_mask.min(c.frames()), rng)?;
            }
            crops.push(c);
        }
        let targets: Vec<usize> = batch.iter().map(|s| s.1).collect();
        let x = stack(&crops)?;

        let tape = Tape::new();
        let step = || -> Result<_> {
            let mut ctx = Ctx::new(&tape, &mut model.store, true);
            let emb = model.net.forward(&mut ctx, tape.constant(x))?;
            let (loss, logits) = model.head.loss(&mut ctx, emb, &targets)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value}")));
            }
            let l = logits.value();
            let s = model.head.speakers;
            let hits = l.data().chunks(s).zip(&targets).filter(|(row, &t)| argmax(row) == t).count();
            Ok((value, hits as f64 / targets.len() as f64, tape.backward(loss)?))
        };
        let (loss, acc, grads) = step().map_err(|e| match e {
            Error::Numeric(m) | Error::Domain(m) => Error::Training(format!("diverged at iteration {it}: {m}")),
            other => other,
        })?;
        model.store.accumulate(&grads);
        adam.step(&mut model.store, lr)?;

        writeln!(log, "{it} {loss:.6} {lr:e} {acc:.4}")?;
        report.iterations = it + 1;
        report.losses.push(loss);
        report.lrs.push(lr);
        report.batch_accuracy.push(acc);

        if let Some(dir) = checkpoints {
            if (it + 1) % half == 0 {
                model.save(&dir.join(format!("ckpt-{}", it + 1)))?;
            }
        }
        if (it + 1) % cfg.eval_every == 0 {
            let accuracy = training_accuracy(model, data, cfg.crop_s, cfg.batch_size)?;
            report.evaluations.push((it + 1, accuracy));
            if cfg.target_accuracy.is_some_and(|target| accuracy > target) {
                break;
            }
        }
    }
    Ok(report)
}
