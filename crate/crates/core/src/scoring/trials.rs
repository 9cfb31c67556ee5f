//! Verification trials and balanced calibration-trial generation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::io::Label;
use crate::error::{Error, Result};

pub const IN_DOMAIN_LANGUAGE: &str = "fa";
pub const MAX_ENROLLMENT: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Label,
    pub n_e: usize,
    pub d_t: f64,
    pub lang_llr: Option<f64>,
}

impl Trial {
    pub fn validate(&self) -> Result<()> {
        if self.n_e == 0 || !(self.d_t > 0.0) {
            return Err(Error::Input(format!(
                "trial {} {} needs n_e >= 1 and d_t > 0",
                self.enroll_id, self.test_id
            )));
        }
        Ok(())
    }
}

/// Utterance metadata needed to build calibration trials.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledUtterance {
    pub id: String,
    pub speaker: String,
    pub language: String,
    pub gender: String,
    pub duration_s: f64,
}

/// A trial together with the utterances forming its enrollment model.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTrial {
    pub trial: Trial,
    pub enrollment: Vec<String>,
}

/// For every speaker, `per_speaker` trials split evenly between targets and
/// nontargets and, within each, between in-domain-language and
/// cross-lingual test utterances. Each trial enrolls between 1 and 10
/// in-domain-language utterances of the speaker. When `cross_gender` is
/// false, nontarget test speakers share the enrolled speaker's gender.
pub fn make_calibration_trials<R: Rng>(
    utterances: &[LabeledUtterance],
    per_speaker: usize,
    cross_gender: bool,
    rng: &mut R,
) -> Result<Vec<GeneratedTrial>> {
    if per_speaker < 4 {
        return Err(Error::Parameter(format!("per_speaker {per_speaker} cannot fill four quotas")));
    }
    if let Some(u) = utterances
        .iter()
        .find(|u| u.language.is_empty() || u.language == "-" || u.gender.is_empty() || u.gender == "-")
    {
        return Err(Error::Input(format!("utterance {} lacks language or gender metadata", u.id)));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&LabeledUtterance>> = BTreeMap::new();
    for u in utterances {
        by_speaker.entry(&u.speaker).or_default().push(u);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Input("calibration trials need at least two speakers".into()));
    }
    let of_language = |list: &[&'_ LabeledUtterance], in_domain: bool| -> Vec<usize> {
        (0..list.len())
            .filter(|&i| (list[i].language == IN_DOMAIN_LANGUAGE) == in_domain)
            .collect()
    };

    let mut out = Vec::with_capacity(per_speaker * by_speaker.len());
    for (speaker, own) in &by_speaker {
        let farsi = of_language(own, true);
        let other = of_language(own, false);
        if farsi.len() < 2 || other.is_empty() {
            return Err(Error::Input(format!(
                "speaker {speaker} cannot fill the in-domain and cross-lingual quotas ({} {IN_DOMAIN_LANGUAGE}, {} other)",
                farsi.len(),
                other.len()
            )));
        }
        let gender = &own[0].gender;
        let impostors = |in_domain: bool| -> Vec<&LabeledUtterance> {
            utterances
                .iter()
                .filter(|u| u.speaker != *speaker && (u.language == IN_DOMAIN_LANGUAGE) == in_domain)
                .filter(|u| cross_gender || &u.gender == gender)
                .collect()
        };
        let (imp_farsi, imp_other) = (impostors(true), impostors(false));
        if imp_farsi.is_empty() || imp_other.is_empty() {
            return Err(Error::Input(format!("no nontarget candidates for speaker {speaker}")));
        }

        let targets = per_speaker / 2;
        let quotas = [
            (true, true, targets / 2),
            (true, false, targets - targets / 2),
            (false, true, (per_speaker - targets) / 2),
            (false, false, per_speaker - targets - (per_speaker - targets) / 2),
        ];
        for (is_target, in_domain, count) in quotas {
            for _ in 0..count {
                let k = out.len();
                let mut pool = farsi.clone();
                let test = if is_target {
                    let candidates = if in_domain { &farsi } else { &other };
                    let t = *candidates.choose(rng).expect("non-empty by check");
                    pool.retain(|&i| i != t);
                    own[t]
                } else {
                    *(if in_domain { &imp_farsi } else { &imp_other }).choose(rng).expect("non-empty by check")
                };
                let n_e = rng.gen_range(1..=MAX_ENROLLMENT).min(pool.len());
                pool.shuffle(rng);
                let mut enrollment: Vec<String> = pool[..n_e].iter().map(|&i| own[i].id.clone()).collect();
                enrollment.sort();
                out.push(GeneratedTrial {
                    trial: Trial {
                        enroll_id: format!("{speaker}-enr{k:05}"),
                        test_id: test.id.clone(),
                        label: Label::from_bool(is_target),
                        n_e,
                        d_t: test.duration_s,
                        lang_llr: None,
                    },
                    enrollment,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(speakers: usize, per: usize, languages: &[&str]) -> Vec<LabeledUtterance> {
        (0..speakers)
            .flat_map(|s| {
                (0..per).map(move |u| LabeledUtterance {
                    id: format!("s{s}-{u}"),
                    speaker: format!("s{s}"),
                    language: languages[u % languages.len()].to_string(),
                    gender: if s % 2 == 0 { "m".into() } else { "f".into() },
                    duration_s: 1.0 + u as f64 * 0.1,
                })
            })
            .collect()
    }

    #[test]
    fn quotas_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = corpus(4, 24, &["fa", "en"]);
        let trials = make_calibration_trials(&data, 100, true, &mut rng).unwrap();
        assert_eq!(trials.len(), 400);
        assert_eq!(trials.iter().filter(|t| t.trial.label == Label::Target).count(), 200);
        let lang = |id: &str| data.iter().find(|u| u.id == id).unwrap().language.clone();
        let farsi_only = trials.iter().filter(|t| lang(&t.trial.test_id) == "fa").count();
        assert_eq!(farsi_only, 200);
        for t in &trials {
            assert_eq!(t.enrollment.len(), t.trial.n_e);
            assert!(t.enrollment.iter().all(|id| lang(id) == "fa"));
            assert!(!t.enrollment.contains(&t.trial.test_id));
            t.trial.validate().unwrap();
        }
    }

    #[test]
    fn same_gender_nontargets_when_requested() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = corpus(6, 12, &["fa", "en"]);
        let gender = |id: &str| data.iter().find(|u| u.id == id).unwrap().gender.clone();
        let trials = make_calibration_trials(&data, 20, false, &mut rng).unwrap();
        for t in trials.iter().filter(|t| t.trial.label == Label::Nontarget) {
            assert_eq!(gender(&t.enrollment[0]), gender(&t.trial.test_id));
        }
    }

    #[test]
    fn enrollment_sizes_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = corpus(10, 40, &["fa", "en"]);
        let trials = make_calibration_trials(&data, 1000, true, &mut rng).unwrap();
        let mut counts = [0usize; MAX_ENROLLMENT + 1];
        trials.iter().for_each(|t| counts[t.trial.n_e] += 1);
        for &c in &counts[1..] {
            let freq = c as f64 / trials.len() as f64;
            assert!((freq - 0.1).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn unsatisfiable_quotas_and_missing_metadata() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mono = corpus(4, 12, &["fa"]);
        assert!(matches!(make_calibration_trials(&mono, 20, true, &mut rng), Err(Error::Input(_))));
        let mut data = corpus(4, 12, &["fa", "en"]);
        data[3].gender = "-".into();
        assert!(matches!(make_calibration_trials(&data, 20, true, &mut rng), Err(Error::Input(_))));
    }
}
