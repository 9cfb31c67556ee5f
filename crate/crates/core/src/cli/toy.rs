//! Synthetic labeled speech: every speaker owns a voice (pitch plus a set
//! of resonances), every utterance a language that tilts the spectrum.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::scoring::io::{write_id_map, write_list, write_trials, ListEntry, TrialKey};
use crate::scoring::{make_calibration_trials, LabeledUtterance};

pub const SAMPLE_RATE: u32 = 16_000;

/// The two pseudo-languages.
pub const LANGUAGES: [&str; 2] = ["fa", "en"];

#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub f0: f64,
    /// `(center Hz, bandwidth Hz)` of each resonance.
    pub formants: Vec<(f64, f64)>,
    pub noise: f64,
    pub gender: char,
}

impl Voice {
    pub fn random<R: Rng>(gender: char, rng: &mut R) -> Self {
        let f0 = if gender == 'm' { rng.gen_range(90.0..150.0) } else { rng.gen_range(170.0..260.0) };
        let bands = [(250.0, 900.0), (900.0, 2300.0), (2300.0, 3600.0), (3600.0, 6000.0)];
        let formants = bands
            .iter()
            .map(|&(lo, hi)| (rng.gen_range(lo..hi), rng.gen_range(60.0..200.0)))
            .collect();
        Voice {
            f0,
            formants,
            noise: rng.gen_range(0.05..0.3),
            gender,
        }
    }
}

/// Spectral tilt coefficient of a language's first-order filter.
pub fn language_tilt(language: &str) -> Result<f64> {
    match language {
        "fa" => Ok(0.7),
        "en" => Ok(-0.5),
        other => Err(Error::Input(format!("unknown toy language `{other}`"))),
    }
}

/// Two-pole resonator state.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center: f64, bandwidth: f64, sr: f64) -> Self {
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * center / sr;
        Resonator {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Level of the untilted background noise relative to the voiced RMS.
const NOISE_FLOOR: f64 = 0.02;

/// Renders one utterance: syllable-gated voicing shaped by the speaker's
/// resonances and the language tilt, over a flat noise floor. Jitter in
/// pitch, rate and resonances keeps utterances of one speaker distinct.
pub fn synthesize(voice: &Voice, language: &str, duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::Parameter(format!("duration {duration_s} must be positive")));
    }
    let tilt = language_tilt(language)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let f0 = voice.f0 * rng.gen_range(0.95..1.05);
    let vibrato = rng.gen_range(2.0..6.0);
    let syllable_rate = rng.gen_range(3.0..6.0);
    let syllable_phase = rng.gen_range(0.0..2.0 * PI);
    let mut resonators: Vec<Resonator> = voice
        .formants
        .iter()
        .map(|&(c, b)| Resonator::new(c * rng.gen_range(0.97..1.03), b, sr))
        .collect();
    let mut phase = 0.0;
    let mut prev = 0.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let pitch = f0 * (1.0 + 0.03 * (2.0 * PI * vibrato * t).sin());
        phase += pitch / sr;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let source = pulse + voice.noise * rng.gen_range(-1.0..1.0);
        let voiced: f64 = resonators.iter_mut().map(|r| r.step(source)).sum();
        let tilted = voiced - tilt * prev;
        prev = voiced;
        let envelope = (2.0 * PI * syllable_rate * t + syllable_phase).sin().max(0.0).sqrt();
        samples.push(tilted * envelope);
    }
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt().max(1e-12);
    samples.iter_mut().for_each(|s| *s += NOISE_FLOOR * rms * rng.gen_range(-1.0..1.0) * 3f64.sqrt());
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = rng.gen_range(0.3..0.6) / peak;
    samples.iter_mut().for_each(|s| *s *= gain);
    Waveform::new(samples, SAMPLE_RATE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDatasetConfig {
    pub train_speakers: usize,
    pub train_utterances: usize,
    pub dev_speakers: usize,
    pub dev_utterances: usize,
    pub eval_speakers: usize,
    pub eval_utterances: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Calibration trials generated per dev speaker.
    pub dev_trials_per_speaker: usize,
    pub eval_trials_per_speaker: usize,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            train_speakers: 8,
            train_utterances: 4,
            dev_speakers: 6,
            dev_utterances: 12,
            eval_speakers: 6,
            eval_utterances: 12,
            min_duration_s: 1.0,
            max_duration_s: 3.0,
            dev_trials_per_speaker: 40,
            eval_trials_per_speaker: 40,
        }
    }
}

/// Metadata of one generated utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub speaker: String,
    pub domain: String,
    pub language: String,
    pub gender: char,
    pub duration_s: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySplit {
    pub name: String,
    pub voices: Vec<(String, Voice)>,
    pub utterances: Vec<ToyUtterance>,
}

impl ToySplit {
    pub fn voice(&self, speaker: &str) -> &Voice {
        &self.voices.iter().find(|(s, _)| s == speaker).expect("speaker of this split").1
    }

    pub fn render(&self, utt: &ToyUtterance) -> Result<Waveform> {
        synthesize(self.voice(&utt.speaker), &utt.language, utt.duration_s, utt.seed)
    }
}

/// Draws one split. Train speakers alternate between an in-domain set
/// (mostly `fa`) and an out-of-domain set (`en` only); dev and eval speakers
/// mix both languages.
pub fn make_split<R: Rng>(name: &str, speakers: usize, per_speaker: usize, cfg: &ToyDatasetConfig, rng: &mut R) -> Result<ToySplit> {
    if !(cfg.min_duration_s > 0.0 && cfg.max_duration_s >= cfg.min_duration_s) {
        return Err(Error::Config(format!(
            "bad toy durations [{}, {}]",
            cfg.min_duration_s, cfg.max_duration_s
        )));
    }
    let mut voices = Vec::with_capacity(speakers);
    let mut utterances = Vec::new();
    for s in 0..speakers {
        let gender = if s % 2 == 0 { 'm' } else { 'f' };
        let speaker = format!("{name}{s:03}");
        let voice = Voice::random(gender, rng);
        let domain = if name == "train" && s % 2 == 1 { "vox" } else { "deepmine" };
        for u in 0..per_speaker {
            let language = if domain == "vox" || u % 2 == 1 { "en" } else { "fa" };
            let duration_s = if cfg.max_duration_s > cfg.min_duration_s {
                rng.gen_range(cfg.min_duration_s..cfg.max_duration_s)
            } else {
                cfg.min_duration_s
            };
            let duration_s = (duration_s * 100.0).round() / 100.0;
            utterances.push(ToyUtterance {
                id: format!("{speaker}-{u:03}"),
                speaker: speaker.clone(),
                domain: domain.to_string(),
                language: language.to_string(),
                gender,
                duration_s,
                seed: rng.gen(),
            });
        }
        voices.push((speaker, voice));
    }
    Ok(ToySplit {
        name: name.to_string(),
        voices,
        utterances,
    })
}

impl ToySplit {
    pub fn list_entries(&self) -> Vec<ListEntry> {
        self.utterances
            .iter()
            .map(|u| ListEntry {
                id: u.id.clone(),
                wav: Path::new("wav").join(format!("{}.wav", u.id)),
                speaker: u.speaker.clone(),
                language: u.language.clone(),
                gender: u.gender.to_string(),
                domain: u.domain.clone(),
            })
            .collect()
    }

    pub fn labeled(&self) -> Vec<LabeledUtterance> {
        self.utterances
            .iter()
            .map(|u| LabeledUtterance {
                id: u.id.clone(),
                speaker: u.speaker.clone(),
                language: u.language.clone(),
                gender: u.gender.to_string(),
                duration_s: u.duration_s,
            })
            .collect()
    }
}

/// Writes the three splits under `out`: `wav/*.wav`, `{split}.list`,
/// trial lists with enrollment maps for dev and eval, and a cohort map of
/// the training speakers.
pub fn write_toy_dataset(out: &Path, cfg: &ToyDatasetConfig, seed: u64, cross_gender: bool) -> Result<Vec<ToySplit>> {
    fs::create_dir_all(out.join("wav"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = [
        ("train", cfg.train_speakers, cfg.train_utterances),
        ("dev", cfg.dev_speakers, cfg.dev_utterances),
        ("eval", cfg.eval_speakers, cfg.eval_utterances),
    ]
    .into_iter()
    .map(|(name, speakers, per)| make_split(name, speakers, per, cfg, &mut rng))
    .collect::<Result<Vec<_>>>()?;
    for split in &splits {
        for u in &split.utterances {
            split.render(u)?.write_wav(&out.join("wav").join(format!("{}.wav", u.id)))?;
        }
        write_list(&out.join(format!("{}.list", split.name)), &split.list_entries())?;
    }
    for (split, per) in [(&splits[1], cfg.dev_trials_per_speaker), (&splits[2], cfg.eval_trials_per_speaker)] {
        let generated = make_calibration_trials(&split.labeled(), per, cross_gender, &mut rng)?;
        let keys: Vec<TrialKey> = generated
            .iter()
            .map(|g| TrialKey {
                enroll: g.trial.enroll_id.clone(),
                test: g.trial.test_id.clone(),
                label: g.trial.label,
            })
            .collect();
        let map: Vec<(String, Vec<String>)> =
            generated.iter().map(|g| (g.trial.enroll_id.clone(), g.enrollment.clone())).collect();
        write_trials(&out.join(format!("{}.trials", split.name)), &keys)?;
        write_id_map(&out.join(format!("{}.enroll", split.name)), &map)?;
    }
    let train = &splits[0];
    let cohort: Vec<(String, Vec<String>)> = train
        .voices
        .iter()
        .map(|(speaker, _)| {
            let ids = train.utterances.iter().filter(|u| &u.speaker == speaker).map(|u| u.id.clone()).collect();
            (speaker.clone(), ids)
        })
        .collect();
    write_id_map(&out.join("cohort.map"), &cohort)?;
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{logmel, mean_normalize};

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Voice::random('f', &mut rng);
        let a = synthesize(&v, "fa", 0.5, 7).unwrap();
        let b = synthesize(&v, "fa", 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples().len(), 8000);
        assert!(a.samples().iter().all(|s| s.abs() <= 0.6 + 1e-12));
        assert!(synthesize(&v, "xx", 0.5, 7).is_err());
    }

    #[test]
    fn languages_shift_spectral_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Voice::random('m', &mut rng);
        let energy = |lang| {
            let f = logmel(&synthesize(&v, lang, 1.0, 3).unwrap(), 32, 25.0, 10.0).unwrap();
            let f = mean_normalize(&f);
            let frames = f.frames();
            let high: f64 = (24..32).map(|m| (0..frames).map(|t| f.get(m, t)).sum::<f64>()).sum();
            let low: f64 = (0..8).map(|m| (0..frames).map(|t| f.get(m, t)).sum::<f64>()).sum();
            (high - low) / frames as f64
        };
        assert!(energy("fa") > energy("en"));
    }

    #[test]
    fn splits_have_the_requested_shape() {
        let cfg = ToyDatasetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let split = make_split("train", 8, 4, &cfg, &mut rng).unwrap();
        assert_eq!(split.utterances.len(), 32);
        assert_eq!(split.voices.len(), 8);
        assert!(split.utterances.iter().all(|u| (1.0..=3.0).contains(&u.duration_s)));
        assert!(split.utterances.iter().any(|u| u.domain == "vox"));
        let dev = make_split("dev", 2, 4, &cfg, &mut rng).unwrap();
        assert!(dev.utterances.iter().any(|u| u.language == "en"));
        assert!(dev.utterances.iter().any(|u| u.language == "fa"));
    }
}
