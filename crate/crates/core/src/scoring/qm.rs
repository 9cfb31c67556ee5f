//! Quality measures fed to the calibration stage.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor of `d_t - d_min` in seconds.
pub const DURATION_CLAMP_S: f64 = 0.05;
pub const ENROLL_CAP: usize = 3;
/// Minimum expected test duration.
pub const DEFAULT_MIN_DURATION_S: f64 = 1.0;

/// `log(max(d_t - d_min, 0.05))`.
pub fn qm_duration(d_t: f64, d_min: f64) -> f64 {
    (d_t - d_min).max(DURATION_CLAMP_S).ln()
}

/// `log(min(n_e, 3))`.
pub fn qm_enroll_count(n_e: usize) -> Result<f64> {
    if n_e == 0 {
        return Err(Error::Input("a trial needs at least one enrollment utterance".into()));
    }
    Ok((n_e.min(ENROLL_CAP) as f64).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMeasure {
    Duration,
    EnrollCount,
    LanguageLlr,
}

impl QualityMeasure {
    pub const ALL: [QualityMeasure; 3] = [QualityMeasure::Duration, QualityMeasure::EnrollCount, QualityMeasure::LanguageLlr];

    pub fn name(self) -> &'static str {
        match self {
            QualityMeasure::Duration => "duration",
            QualityMeasure::EnrollCount => "enroll_count",
            QualityMeasure::LanguageLlr => "language_llr",
        }
    }
}

impl FromStr for QualityMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QualityMeasure::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown quality measure `{s}`")))
    }
}

/// Raw per-trial side information from which quality measures derive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialQuality {
    pub n_e: usize,
    pub d_t: f64,
    pub lang_llr: Option<f64>,
}

impl TrialQuality {
    pub fn measures(&self, which: &[QualityMeasure], d_min: f64) -> Result<Vec<f64>> {
        which
            .iter()
            .map(|q| match q {
                QualityMeasure::Duration => {
                    if !(self.d_t > 0.0) {
                        return Err(Error::Input(format!("test duration {} must be positive", self.d_t)));
                    }
                    Ok(qm_duration(self.d_t, d_min))
                }
                QualityMeasure::EnrollCount => qm_enroll_count(self.n_e),
                QualityMeasure::LanguageLlr => self
                    .lang_llr
                    .ok_or_else(|| Error::Input("language llr requested but not computed".into())),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duration_cases() {
        assert_eq!(qm_duration(2.0, 1.0), 0.0);
        assert!((qm_duration(1.0, 1.0) - (-2.995732273553991)).abs() < 1e-12);
        assert!((qm_duration(1.0 + std::f64::consts::E, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enroll_count_cases() {
        assert_eq!(qm_enroll_count(1).unwrap(), 0.0);
        assert!((qm_enroll_count(3).unwrap() - 1.0986122886681098).abs() < 1e-12);
        assert_eq!(qm_enroll_count(5).unwrap(), 3f64.ln());
        assert!(qm_enroll_count(0).is_err());
    }

    #[test]
    fn measure_selection() {
        let q = TrialQuality { n_e: 2, d_t: 3.0, lang_llr: None };
        let v = q.measures(&[QualityMeasure::EnrollCount, QualityMeasure::Duration], 1.0).unwrap();
        assert_eq!(v, vec![2f64.ln(), 2f64.ln()]);
        assert!(q.measures(&[QualityMeasure::LanguageLlr], 1.0).is_err());
        assert_eq!("language_llr".parse::<QualityMeasure>().unwrap(), QualityMeasure::LanguageLlr);
    }
}
