//! Equal error rate and minimum detection cost.

use crate::error::{Error, Result};

/// Cost model of a detection cost function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl DcfParams {
    pub const PRIMARY: DcfParams = DcfParams { p_target: 0.01, c_miss: 10.0, c_fa: 1.0 };
    pub const SECONDARY: DcfParams = DcfParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0 && self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Parameter(format!("invalid detection costs {self:?}")));
        }
        Ok(())
    }

    /// Cost of always rejecting or always accepting, whichever is lower.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Error counts at every distinct threshold, from accepting nothing to
/// accepting everything.
struct Sweep {
    n_tar: usize,
    n_non: usize,
    /// `(misses, false alarms)` after each unique score has been accepted.
    points: Vec<(usize, usize)>,
}

fn sweep(scores: &[(f64, bool)]) -> Result<Sweep> {
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }
    let n_tar = scores.iter().filter(|s| s.1).count();
    let n_non = scores.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::Metric(format!("need both classes, got {n_tar} targets and {n_non} nontargets")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(n_tar, 0)];
    let (mut miss, mut fa) = (n_tar, 0);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                miss -= 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        points.push((miss, fa));
    }
    Ok(Sweep { n_tar, n_non, points })
}

/// Equal error rate with linear interpolation between ROC points.
pub fn eer(scores: &[(f64, bool)]) -> Result<f64> {
    let sw = sweep(scores)?;
    let rates: Vec<(f64, f64)> = sw
        .points
        .iter()
        .map(|&(m, f)| (m as f64 / sw.n_tar as f64, f as f64 / sw.n_non as f64))
        .collect();
    for w in rates.windows(2) {
        let (m0, f0) = w[0];
        let (m1, f1) = w[1];
        let (d0, d1) = (m0 - f0, m1 - f1);
        if d0 >= 0.0 && d1 <= 0.0 {
            if d0 == d1 {
                return Ok(m0);
            }
            let a = d0 / (d0 - d1);
            return Ok(m0 + a * (m1 - m0));
        }
    }
    Err(Error::Contract("ROC never crosses the diagonal".into()))
}

/// Normalized minimum detection cost over all thresholds.
pub fn min_dcf(scores: &[(f64, bool)], params: DcfParams) -> Result<f64> {
    params.validate()?;
    let sw = sweep(scores)?;
    let best = sw
        .points
        .iter()
        .map(|&(m, f)| {
            params.c_miss * params.p_target * (m as f64 / sw.n_tar as f64)
                + params.c_fa * (1.0 - params.p_target) * (f as f64 / sw.n_non as f64)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best / params.default_cost())
}
