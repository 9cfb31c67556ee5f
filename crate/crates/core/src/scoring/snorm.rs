//! Adaptive symmetric score normalization against an imposter cohort.

use super::embedding::{cosine_score, enroll_model, SpeakerEmbedding};
use crate::error::{Error, Result};

/// Mean and standard deviation of one side's top-K imposter scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics of the `k` highest scores (all of them when fewer exist).
pub fn cohort_stats_from_scores(scores: &[f64], k: usize) -> Result<CohortStats> {
    if scores.is_empty() || k == 0 {
        return Err(Error::Config("s-norm needs a non-empty cohort and K >= 1".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(k);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = (sorted.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(CohortStats { mean, std })
}

/// `0.5 * ((raw - mu_e) / sigma_e + (raw - mu_t) / sigma_t)`.
pub fn snorm(raw: f64, enroll: &CohortStats, test: &CohortStats) -> Result<f64> {
    if !(enroll.std > 0.0 && test.std > 0.0) {
        return Err(Error::Numeric(format!(
            "degenerate cohort: standard deviations {} and {}",
            enroll.std, test.std
        )));
    }
    Ok(0.5 * ((raw - enroll.mean) / enroll.std + (raw - test.mean) / test.std))
}

/// Imposter models, each the average of one cohort speaker's embeddings.
#[derive(Clone, Debug)]
pub struct Cohort {
    models: Vec<SpeakerEmbedding>,
    pub top_k: usize,
}

impl Cohort {
    pub fn new(models: Vec<SpeakerEmbedding>, top_k: usize) -> Result<Self> {
        if models.is_empty() || top_k == 0 {
            return Err(Error::Config("s-norm needs a non-empty cohort and K >= 1".into()));
        }
        Ok(Cohort { models, top_k })
    }

    /// Builds one imposter model per speaker from grouped embeddings.
    pub fn from_speakers(speakers: &[Vec<SpeakerEmbedding>], top_k: usize) -> Result<Self> {
        let models = speakers.iter().map(|e| enroll_model(e)).collect::<Result<Vec<_>>>()?;
        Cohort::new(models, top_k)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn stats(&self, side: &SpeakerEmbedding) -> Result<CohortStats> {
        let scores = self.models.iter().map(|m| cosine_score(side, m)).collect::<Result<Vec<_>>>()?;
        cohort_stats_from_scores(&scores, self.top_k)
    }

    pub fn normalize(&self, raw: f64, enroll: &SpeakerEmbedding, test: &SpeakerEmbedding) -> Result<f64> {
        snorm(raw, &self.stats(enroll)?, &self.stats(test)?)
    }
}
