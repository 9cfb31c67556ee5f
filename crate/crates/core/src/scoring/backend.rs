//! Two-class Gaussian backend with a shared covariance, used as a language
//! classifier on pooling-layer features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBackend {
    pub mean_pos: Vec<f64>,
    pub mean_neg: Vec<f64>,
    pub covariance: DMatrix<f64>,
    weights: Vec<f64>,
    offset: f64,
}

impl GaussianBackend {
    /// Fits class means and the pooled within-class ML covariance. Samples
    /// labelled `positive` form one class; every other label the other.
    pub fn train(samples: &[(Vec<f64>, String)], positive: &str) -> Result<Self> {
        GaussianBackend::train_with_ridge(samples, positive, COVARIANCE_RIDGE)
    }

    /// As [`GaussianBackend::train`] with an explicit diagonal loading.
    pub fn train_with_ridge(samples: &[(Vec<f64>, String)], positive: &str, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0) {
            return Err(Error::Parameter(format!("covariance ridge {ridge} must be positive")));
        }
        let dim = samples.first().map(|s| s.0.len()).ok_or_else(|| Error::Input("no backend samples".into()))?;
        if dim == 0 || samples.iter().any(|s| s.0.len() != dim) {
            return Err(Error::Dimension("backend samples must share a positive dimension".into()));
        }
        let is_pos = |s: &(Vec<f64>, String)| s.1 == positive;
        let n_pos = samples.iter().filter(|s| is_pos(s)).count();
        let n_neg = samples.len() - n_pos;
        if n_pos < 2 || n_neg < 2 {
            return Err(Error::Input(format!("backend needs two samples per class, got {n_pos} and {n_neg}")));
        }
        let mean = |pos: bool, n: usize| {
            let mut m = vec![0.0; dim];
            for s in samples.iter().filter(|s| is_pos(s) == pos) {
                m.iter_mut().zip(&s.0).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= n as f64);
            m
        };
        let (mean_pos, mean_neg) = (mean(true, n_pos), mean(false, n_neg));
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for s in samples {
            let mu = if is_pos(s) { &mean_pos } else { &mean_neg };
            let d = DVector::from_iterator(dim, s.0.iter().zip(mu).map(|(x, m)| x - m));
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= samples.len() as f64;
        for i in 0..dim {
            cov[(i, i)] += ridge;
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("backend covariance is not positive definite".into()))?;
        let diff = DVector::from_iterator(dim, mean_pos.iter().zip(&mean_neg).map(|(a, b)| a - b));
        let w = chol.solve(&diff);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("backend covariance is singular".into()));
        }
        let mid = DVector::from_iterator(dim, mean_pos.iter().zip(&mean_neg).map(|(a, b)| 0.5 * (a + b)));
        let offset = -w.dot(&mid);
        Ok(GaussianBackend {
            mean_pos,
            mean_neg,
            covariance: cov,
            weights: w.iter().copied().collect(),
            offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `log N(x; mu_pos, S) - log N(x; mu_neg, S)`.
    pub fn llr(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("backend of dim {} got {}", self.dim(), x.len())));
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(v: &[f64], lang: &str) -> (Vec<f64>, String) {
        (v.to_vec(), lang.to_string())
    }

    #[test]
    fn symmetric_one_dimensional_case() {
        let data = [
            sample(&[0.0], "fa"),
            sample(&[2.0], "fa"),
            sample(&[-2.0], "en"),
            sample(&[0.0], "en"),
        ];
        let gb = GaussianBackend::train(&data, "fa").unwrap();
        assert_eq!(gb.mean_pos, vec![1.0]);
        assert_eq!(gb.mean_neg, vec![-1.0]);
        assert!((gb.covariance[(0, 0)] - (1.0 + COVARIANCE_RIDGE)).abs() < 1e-15);
        assert!(gb.llr(&[0.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn equal_means_give_zero_llr() {
        let data = [
            sample(&[1.0, 0.0], "fa"),
            sample(&[-1.0, 0.0], "fa"),
            sample(&[0.0, 1.0], "en"),
            sample(&[0.0, -1.0], "en"),
        ];
        let gb = GaussianBackend::train(&data, "fa").unwrap();
        for x in [[3.0, -1.0], [0.2, 0.7]] {
            assert!(gb.llr(&x).unwrap().abs() < 1e-12);
        }
    }

    fn log_density(x: &[f64], mu: &[f64], cov: &DMatrix<f64>) -> f64 {
        let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        let det = a * c - b * b;
        let (dx, dy) = (x[0] - mu[0], x[1] - mu[1]);
        let quad = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn matches_direct_density_ratio_and_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<_> = (0..40)
            .map(|i| {
                let shift = if i % 2 == 0 { 1.0 } else { -0.5 };
                let lang = if i % 2 == 0 { "fa" } else { "en" };
                (vec![shift + rng.gen_range(-1.0..1.0), 0.3 * shift + rng.gen_range(-1.0..1.0)], lang.to_string())
            })
            .collect();
        let gb = GaussianBackend::train(&data, "fa").unwrap();
        let x = [0.4, -1.3];
        let oracle = log_density(&x, &gb.mean_pos, &gb.covariance) - log_density(&x, &gb.mean_neg, &gb.covariance);
        assert!((gb.llr(&x).unwrap() - oracle).abs() < 1e-10);
        let origin = gb.llr(&[0.0, 0.0]).unwrap();
        let (u, v) = ([0.7, 0.1], [-0.2, 0.9]);
        let sum = [u[0] + v[0], u[1] + v[1]];
        let lin = |p: &[f64]| gb.llr(p).unwrap() - origin;
        assert!((lin(&sum) - lin(&u) - lin(&v)).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_per_class() {
        let data = [sample(&[0.0], "fa"), sample(&[1.0], "fa"), sample(&[2.0], "en")];
        assert!(GaussianBackend::train(&data, "fa").is_err());
    }
}
