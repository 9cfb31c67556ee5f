//! Speaker embeddings, enrollment models and cosine scoring.

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    vector: Vec<f64>,
    normalized: bool,
}

impl SpeakerEmbedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Input("empty embedding".into()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding entry".into()));
        }
        Ok(SpeakerEmbedding {
            vector,
            normalized: false,
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn into_vector(self) -> Vec<f64> {
        self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<SpeakerEmbedding> {
        if self.normalized {
            return Ok(self.clone());
        }
        let n = self.norm();
        if n < ZERO_NORM {
            return Err(Error::Input("cannot normalize a zero embedding".into()));
        }
        Ok(SpeakerEmbedding {
            vector: self.vector.iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }
}

/// Mean of the length-normalized enrollment embeddings, renormalized.
pub fn enroll_model(embs: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let first = embs
        .first()
        .ok_or_else(|| Error::Input("enrollment needs at least one embedding".into()))?;
    let dim = first.dim();
    let mut mean = vec![0.0; dim];
    for e in embs {
        if e.dim() != dim {
            return Err(Error::Dimension(format!(
                "enrollment embeddings of dims {dim} and {}",
                e.dim()
            )));
        }
        let n = e.normalized()?;
        mean.iter_mut().zip(n.vector()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= embs.len() as f64);
    SpeakerEmbedding::new(mean)?
        .normalized()
        .map_err(|_| Error::Input("degenerate enrollment: embeddings average to zero".into()))
}

/// Cosine similarity, symmetric and within [-1, 1].
pub fn cosine_score(e: &SpeakerEmbedding, t: &SpeakerEmbedding) -> Result<f64> {
    if e.dim() != t.dim() {
        return Err(Error::Dimension(format!(
            "cosine between dims {} and {}",
            e.dim(),
            t.dim()
        )));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (ee, tt) = (dot(e.vector(), e.vector()), dot(t.vector(), t.vector()));
    if ee.sqrt() < ZERO_NORM || tt.sqrt() < ZERO_NORM {
        return Err(Error::Input("cosine score of a zero embedding".into()));
    }
    Ok((dot(e.vector(), t.vector()) / (ee * tt).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f64]) -> SpeakerEmbedding {
        SpeakerEmbedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_enrollment_is_itself_normalized() {
        let m = enroll_model(&[emb(&[3.0, 4.0])]).unwrap();
        assert_eq!(m.vector(), &[0.6, 0.8]);
        assert!(m.is_normalized());
    }

    #[test]
    fn antipodal_enrollment_is_degenerate() {
        let err = enroll_model(&[emb(&[1.0, 0.0]), emb(&[-2.0, 0.0])]).unwrap_err();
        assert!(matches!(err, Error::Input(ref m) if m.contains("degenerate")));
        assert!(enroll_model(&[]).is_err());
    }

    #[test]
    fn enrollment_matches_scalar_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let embs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut avg = [0.0; 5];
        for e in &embs {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..5 {
                avg[i] += e[i] / n / 3.0;
            }
        }
        let n = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
        let model = enroll_model(&embs.iter().map(|e| emb(e)).collect::<Vec<_>>()).unwrap();
        for i in 0..5 {
            assert!((model.vector()[i] - avg[i] / n).abs() < 1e-12);
        }
        assert!((model.norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cosine_cases() {
        let a = emb(&[1.0, 2.0, -1.0]);
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&emb(&[1.0, 0.0]), &emb(&[0.0, 5.0])).unwrap(), 0.0);
        let b = emb(&[0.5, -0.3, 2.0]);
        let oracle = (0.5 - 0.6 - 2.0) / (6.0f64.sqrt() * (0.25f64 + 0.09 + 4.0).sqrt());
        assert!((cosine_score(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(cosine_score(&a, &b).unwrap(), cosine_score(&b, &a).unwrap());
        assert!(cosine_score(&a, &emb(&[0.0, 0.0, 0.0])).is_err());
    }
}
