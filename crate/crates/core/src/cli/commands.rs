//! The pipeline commands as library calls; the binary only parses flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, FeatureConfig};
use crate::error::{Error, Result};
use crate::features::{logmel_with, mean_normalize, FeatureMatrix, LogMelConfig, Waveform};
use crate::scoring::io::{
    read_id_map, read_list, read_quality, read_scores, read_trials, write_quality, write_scores, ListEntry, QualityRow,
};
use crate::scoring::{
    calibrate_train, cosine_score, eer, enroll_model, fuse, min_dcf, Archive, CalibrationModel, CalibrationTrial, Cohort,
    DcfParams, GaussianBackend, Label, QualityMeasure, ScoredTrial, SpeakerEmbedding, TrialQuality, UtteranceMeta,
};
use crate::tensor::Tensor;
use crate::train::{
    train_loop, DomainBalancedSampler, ModelSpec, ShuffleSampler, SpeakerModel, TrainReport, TrainingSet,
};

pub const TARGET_LANGUAGE: &str = "fa";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    Lmft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Lmft => "lmft",
        }
    }
}

pub fn load_features(wav: &Path, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let w = Waveform::read_wav(wav)?;
    let mel = LogMelConfig {
        n_mels: cfg.n_mels,
        win_ms: cfg.win_ms,
        hop_ms: cfg.hop_ms,
        ..LogMelConfig::default()
    };
    Ok(mean_normalize(&logmel_with(&w, &mel)?))
}

/// Reads a labelled list into a training set; speakers are numbered in
/// sorted order.
pub fn training_set(entries: &[ListEntry], cfg: &FeatureConfig) -> Result<TrainingSet> {
    let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker.as_str()).collect();
    let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut features = Vec::with_capacity(entries.len());
    for e in entries {
        features.push(load_features(&e.wav, cfg)?);
    }
    let labels = entries.iter().map(|e| index[e.speaker.as_str()]).collect();
    let domains = entries.iter().map(|e| e.domain.clone()).collect();
    TrainingSet::new(features, labels, domains)
}

/// Trains one stage into `out/{stage}` with logs `out/{stage}.log` and
/// `out/{stage}.accuracy`. Fine-tuning starts from `out/base`.
pub fn cmd_train(cfg: &ExperimentConfig, list: &Path, out: &Path, stage: Stage) -> Result<TrainReport> {
    cfg.validate()?;
    let entries = read_list(list)?;
    let data = training_set(&entries, &cfg.features)?;
    let mut train_cfg = cfg.train.clone();
    let mut model = match stage {
        Stage::Base => SpeakerModel::new(
            &ModelSpec {
                speakers: data.speakers,
                aam: cfg.aam,
                network: cfg.network.clone(),
            },
            cfg.seed,
        )?,
        Stage::Lmft => {
            let base = out.join(Stage::Base.name());
            if !base.exists() {
                return Err(Error::Config(format!("fine-tuning needs a base checkpoint at {}", base.display())));
            }
            let mut model = SpeakerModel::load(&base)?;
            cfg.stages.finetune.apply(&mut train_cfg, &mut model)?;
            train_cfg.max_iterations = cfg.stages.finetune_iterations;
            train_cfg.target_accuracy = None;
            model
        }
    };
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut log = BufWriter::new(fs::File::create(out.join(format!("{}.log", stage.name())))?);
    let checkpoints = out.join(format!("{}-checkpoints", stage.name()));
    let report = if cfg.sampler.domain_balanced {
        let mut sampler =
            DomainBalancedSampler::new(data.balanced_domains(&cfg.sampler.in_domain), cfg.sampler.balance_count)?;
        train_loop(&mut model, &data, &train_cfg, &mut sampler, &mut rng, &mut log, Some(&checkpoints))?
    } else {
        let mut sampler = ShuffleSampler::new(data.samples())?;
        train_loop(&mut model, &data, &train_cfg, &mut sampler, &mut rng, &mut log, Some(&checkpoints))?
    };
    log.flush()?;
    let mut acc = String::new();
    for (it, a) in &report.evaluations {
        writeln!(acc, "{it} {a:.6}").expect("writing to a String cannot fail");
    }
    fs::write(out.join(format!("{}.accuracy", stage.name())), acc)?;
    model.save(&out.join(stage.name()))?;
    Ok(report)
}

/// Path of the pooled-statistics archive written next to an embedding
/// archive.
pub fn pooled_stem(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".pooled");
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractSummary {
    pub extracted: usize,
    pub failed: usize,
}

/// Embeds every list entry. Failures are recorded in `{out}.errors` and
/// reported as a data error after the archive has been written.
pub fn cmd_extract(model_dir: &Path, list: &Path, out: &Path, features: &FeatureConfig) -> Result<ExtractSummary> {
    let mut model = SpeakerModel::load(model_dir)?;
    let entries = read_list(list)?;
    let feature_cfg = FeatureConfig {
        n_mels: model.net.config().n_mels,
        ..features.clone()
    };
    let mut embeddings = Archive::default();
    let mut pooled = Archive::default();
    let mut errors = String::new();
    for e in &entries {
        let result = (|| -> Result<(SpeakerEmbedding, Vec<f64>, f64)> {
            let duration = Waveform::read_wav(&e.wav)?.duration_s();
            let f = load_features(&e.wav, &feature_cfg)?;
            let (emb, stats) = model.net.embed_with_pooled(&mut model.store, &f)?;
            Ok((emb, stats, duration))
        })();
        match result {
            Ok((emb, stats, duration_s)) => {
                let meta = UtteranceMeta {
                    id: e.id.clone(),
                    duration_s,
                    language: e.language.clone(),
                    gender: e.gender.clone(),
                    domain: e.domain.clone(),
                };
                let dim = emb.dim();
                embeddings.entries.push((e.id.clone(), Tensor::new(&[dim], emb.into_vector())?));
                let len = stats.len();
                pooled.entries.push((e.id.clone(), Tensor::new(&[len], stats)?));
                embeddings.meta.push(meta.clone());
                pooled.meta.push(meta);
            }
            Err(err) => writeln!(errors, "{} {err}", e.id).expect("writing to a String cannot fail"),
        }
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    embeddings.save(out)?;
    pooled.save(&pooled_stem(out))?;
    let mut errors_path = out.as_os_str().to_owned();
    errors_path.push(".errors");
    fs::write(PathBuf::from(errors_path), &errors)?;
    let summary = ExtractSummary {
        extracted: embeddings.len(),
        failed: entries.len() - embeddings.len(),
    };
    if summary.failed > 0 {
        return Err(Error::Input(format!("{} of {} items failed to extract", summary.failed, entries.len())));
    }
    Ok(summary)
}

fn embeddings_of(archive: &Archive) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    archive
        .entries
        .iter()
        .map(|(id, t)| Ok((id.clone(), SpeakerEmbedding::new(t.data().to_vec())?)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreOptions {
    pub embeddings: PathBuf,
    pub trials: PathBuf,
    /// Enrollment models as `model utt utt ...`; unmapped ids are scored as
    /// single utterances.
    pub enroll: Option<PathBuf>,
    /// Cohort speakers as `speaker utt utt ...`.
    pub cohort: Option<PathBuf>,
    /// Archive holding the cohort utterances, the scored archive by default.
    pub cohort_embeddings: Option<PathBuf>,
    pub snorm_top_k: Option<usize>,
    pub quality_out: Option<PathBuf>,
    /// Labelled archive whose pooled statistics train the language backend.
    pub language_backend: Option<PathBuf>,
}

fn resolve<'a>(map: &'a BTreeMap<String, SpeakerEmbedding>, id: &str) -> Result<&'a SpeakerEmbedding> {
    map.get(id).ok_or_else(|| Error::Input(format!("unresolved id `{id}`")))
}

/// Cosine scores, optionally s-normalized, in trial-list order.
pub fn cmd_score(opts: &ScoreOptions, out: &Path) -> Result<Vec<ScoredTrial>> {
    let archive = Archive::load(&opts.embeddings)?;
    let embs = embeddings_of(&archive)?;
    let trials = read_trials(&opts.trials)?;
    let enroll_map: BTreeMap<String, Vec<String>> = match &opts.enroll {
        Some(p) => read_id_map(p)?.into_iter().collect(),
        None => BTreeMap::new(),
    };
    let cohort = match opts.snorm_top_k {
        None => None,
        Some(k) => {
            let path = opts
                .cohort
                .as_ref()
                .ok_or_else(|| Error::Config("s-norm requested without a cohort".into()))?;
            let speakers = read_id_map(path)?;
            if speakers.is_empty() {
                return Err(Error::Config(format!("cohort {} is empty", path.display())));
            }
            let cohort_embs = match &opts.cohort_embeddings {
                Some(stem) => embeddings_of(&Archive::load(stem)?)?,
                None => embs.clone(),
            };
            let groups = speakers
                .iter()
                .map(|(_, ids)| ids.iter().map(|id| resolve(&cohort_embs, id).cloned()).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            Some(Cohort::from_speakers(&groups, k)?)
        }
    };

    let mut models: BTreeMap<&str, (SpeakerEmbedding, usize)> = BTreeMap::new();
    for t in &trials {
        if models.contains_key(t.enroll.as_str()) {
            continue;
        }
        let model = match enroll_map.get(&t.enroll) {
            Some(ids) => {
                let members = ids.iter().map(|id| resolve(&embs, id).cloned()).collect::<Result<Vec<_>>>()?;
                (enroll_model(&members)?, members.len())
            }
            None => (resolve(&embs, &t.enroll)?.clone(), 1),
        };
        models.insert(&t.enroll, model);
    }

    let mut stats_cache = BTreeMap::new();
    let mut side_stats = |key: (bool, &str), emb: &SpeakerEmbedding, cohort: &Cohort| -> Result<_> {
        if let Some(s) = stats_cache.get(&(key.0, key.1.to_string())) {
            return Ok(*s);
        }
        let s = cohort.stats(emb)?;
        stats_cache.insert((key.0, key.1.to_string()), s);
        Ok(s)
    };
    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials {
        let (model, _) = &models[t.enroll.as_str()];
        let test = resolve(&embs, &t.test)?;
        let raw = cosine_score(model, test)?;
        let score = match &cohort {
            None => raw,
            Some(c) => {
                let e = side_stats((true, &t.enroll), model, c)?;
                let s = side_stats((false, &t.test), test, c)?;
                crate::scoring::snorm(raw, &e, &s)?
            }
        };
        scores.push(ScoredTrial { enroll: t.enroll.clone(), test: t.test.clone(), score });
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_scores(out, &scores)?;

    if let Some(qpath) = &opts.quality_out {
        let meta = archive.meta_lookup();
        let backend = match &opts.language_backend {
            None => None,
            Some(stem) => {
                let labelled = Archive::load(&pooled_stem(stem))?;
                let langs = labelled.meta_lookup();
                let samples = labelled
                    .entries
                    .iter()
                    .map(|(id, t)| {
                        let m = langs.get(id.as_str()).ok_or_else(|| Error::Input(format!("no language for `{id}`")))?;
                        Ok((t.data().to_vec(), m.language.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gb = GaussianBackend::train(&samples, TARGET_LANGUAGE)?;
                Some((gb, Archive::load(&pooled_stem(&opts.embeddings))?))
            }
        };
        let pooled = backend.as_ref().map(|(_, a)| a.lookup());
        let rows = trials
            .iter()
            .map(|t| {
                let m = meta.get(t.test.as_str()).ok_or_else(|| Error::Input(format!("no metadata for `{}`", t.test)))?;
                let lang_llr = match (&backend, &pooled) {
                    (Some((gb, _)), Some(p)) => {
                        let x = p.get(t.test.as_str()).ok_or_else(|| Error::Input(format!("unresolved id `{}`", t.test)))?;
                        Some(gb.llr(x.data())?)
                    }
                    _ => None,
                };
                Ok(QualityRow {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                    n_e: models[t.enroll.as_str()].1,
                    d_t: m.duration_s,
                    lang_llr,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_quality(qpath, &rows)?;
    }
    Ok(scores)
}

type TrialPair = (String, String);

fn labels_of(path: &Path) -> Result<BTreeMap<TrialPair, Label>> {
    Ok(read_trials(path)?.into_iter().map(|t| ((t.enroll, t.test), t.label)).collect())
}

fn label_for(labels: &BTreeMap<TrialPair, Label>, s: &ScoredTrial) -> Result<bool> {
    labels
        .get(&(s.enroll.clone(), s.test.clone()))
        .and_then(|l| l.is_target())
        .ok_or_else(|| Error::Config(format!("label file lacks trial `{} {}`", s.enroll, s.test)))
}

fn quality_lookup(path: &Path) -> Result<BTreeMap<TrialPair, QualityRow>> {
    Ok(read_quality(path)?.into_iter().map(|r| ((r.enroll.clone(), r.test.clone()), r)).collect())
}

fn measures_for(
    quality: Option<&BTreeMap<TrialPair, QualityRow>>,
    s: &ScoredTrial,
    measures: &[QualityMeasure],
    d_min: f64,
) -> Result<Vec<f64>> {
    if measures.is_empty() {
        return Ok(Vec::new());
    }
    let q = quality.ok_or_else(|| Error::Config("quality measures requested without a quality file".into()))?;
    let row = q
        .get(&(s.enroll.clone(), s.test.clone()))
        .ok_or_else(|| Error::Input(format!("no quality row for `{} {}`", s.enroll, s.test)))?;
    TrialQuality { n_e: row.n_e, d_t: row.d_t, lang_llr: row.lang_llr }.measures(measures, d_min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrateOptions {
    pub scores: PathBuf,
    pub trials: PathBuf,
    pub quality: Option<PathBuf>,
    pub measures: Vec<QualityMeasure>,
    pub prior: f64,
    pub min_duration_s: f64,
}

pub fn cmd_calibrate(opts: &CalibrateOptions, out: &Path) -> Result<CalibrationModel> {
    let labels = labels_of(&opts.trials)?;
    let quality = opts.quality.as_deref().map(quality_lookup).transpose()?;
    let trials = read_scores(&opts.scores)?
        .iter()
        .map(|s| {
            Ok(CalibrationTrial {
                score: s.score,
                qms: measures_for(quality.as_ref(), s, &opts.measures, opts.min_duration_s)?,
                target: label_for(&labels, s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = calibrate_train(&trials, &opts.measures, opts.prior)?;
    model.save(out)?;
    Ok(model)
}

pub fn cmd_fuse(scores: &[PathBuf], weights: &[f64], out: &Path) -> Result<Vec<ScoredTrial>> {
    let systems = scores.iter().map(|p| read_scores(p)).collect::<Result<Vec<_>>>()?;
    let fused = fuse(&systems, weights)?;
    write_scores(out, &fused)?;
    Ok(fused)
}

/// Metrics of one score list in the fixed report schema.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub trials: usize,
    pub targets: usize,
    pub eer: f64,
    pub min_dcf: f64,
    pub min_dcf2: f64,
}

impl EvalReport {
    pub fn compute(labelled: &[(f64, bool)]) -> Result<Self> {
        Ok(EvalReport {
            trials: labelled.len(),
            targets: labelled.iter().filter(|s| s.1).count(),
            eer: eer(labelled)?,
            min_dcf: min_dcf(labelled, DcfParams::PRIMARY)?,
            min_dcf2: min_dcf(labelled, DcfParams::SECONDARY)?,
        })
    }

    pub fn to_text(&self) -> String {
        let (p, s) = (DcfParams::PRIMARY, DcfParams::SECONDARY);
        format!(
            "trials {}\ntargets {}\nnontargets {}\nEER(%) {:.2}\nMinDCF(p={},Cmiss={},Cfa={}) {:.4}\nMinDCF2(p={},Cmiss={},Cfa={}) {:.4}\n",
            self.trials,
            self.targets,
            self.trials - self.targets,
            100.0 * self.eer,
            p.p_target,
            p.c_miss,
            p.c_fa,
            self.min_dcf,
            s.p_target,
            s.c_miss,
            s.c_fa,
            self.min_dcf2
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub scores: PathBuf,
    pub trials: PathBuf,
    pub calibration: Option<PathBuf>,
    pub quality: Option<PathBuf>,
    pub min_duration_s: f64,
}

pub fn cmd_eval(opts: &EvalOptions, out: &Path) -> Result<EvalReport> {
    let labels = labels_of(&opts.trials)?;
    let quality = opts.quality.as_deref().map(quality_lookup).transpose()?;
    let model = opts.calibration.as_deref().map(CalibrationModel::load).transpose()?;
    let labelled = read_scores(&opts.scores)?
        .iter()
        .map(|s| {
            let score = match &model {
                None => s.score,
                Some(m) => m.apply(s.score, &measures_for(quality.as_ref(), s, &m.measures, opts.min_duration_s)?)?,
            };
            Ok((score, label_for(&labels, s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::compute(&labelled)?;
    fs::write(out, report.to_text())?;
    Ok(report)
}
