//! Weighted linear fusion of aligned score lists.

use super::io::ScoredTrial;
use crate::error::{Error, Result};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Sums `weights[k] * scores[k]` trial by trial. All lists must cover the
/// same trials in the same order and the weights must add up to one.
pub fn fuse(systems: &[Vec<ScoredTrial>], weights: &[f64]) -> Result<Vec<ScoredTrial>> {
    if systems.is_empty() || systems.len() != weights.len() {
        return Err(Error::Parameter(format!("{} systems with {} weights", systems.len(), weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Parameter(format!("fusion weights sum to {total}, not 1")));
    }
    let first = &systems[0];
    for (k, sys) in systems.iter().enumerate().skip(1) {
        if sys.len() != first.len() {
            return Err(Error::Input(format!("system {k} has {} trials, expected {}", sys.len(), first.len())));
        }
        if let Some((a, b)) = first.iter().zip(sys).find(|(a, b)| a.enroll != b.enroll || a.test != b.test) {
            return Err(Error::Input(format!(
                "system {k} is misaligned: `{} {}` against `{} {}`",
                b.enroll, b.test, a.enroll, a.test
            )));
        }
    }
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, t)| ScoredTrial {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score: systems.iter().zip(weights).map(|(s, w)| w * s[i].score).sum(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(scores: &[f64]) -> Vec<ScoredTrial> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredTrial { enroll: format!("m{i}"), test: format!("t{i}"), score: s })
            .collect()
    }

    #[test]
    fn weighted_sum() {
        let f = fuse(&[list(&[1.0, 2.0]), list(&[3.0, -2.0])], &[0.25, 0.75]).unwrap();
        assert_eq!(f.iter().map(|t| t.score).collect::<Vec<_>>(), vec![2.5, -1.0]);
        assert_eq!(fuse(&[list(&[0.4])], &[1.0]).unwrap(), list(&[0.4]));
    }

    #[test]
    fn rejects_bad_weights_and_misalignment() {
        assert!(matches!(fuse(&[list(&[1.0]), list(&[1.0])], &[0.5, 0.6]), Err(Error::Parameter(_))));
        let mut other = list(&[1.0, 2.0]);
        other.swap(0, 1);
        assert!(matches!(fuse(&[list(&[1.0, 2.0]), other], &[0.5, 0.5]), Err(Error::Input(_))));
        assert!(matches!(fuse(&[list(&[1.0, 2.0]), list(&[1.0])], &[0.5, 0.5]), Err(Error::Input(_))));
    }
}
