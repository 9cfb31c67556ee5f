//! Quality-aware linear calibration trained by prior-weighted logistic
//! regression.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::qm::QualityMeasure;
use crate::error::{Error, Result};

pub const DEFAULT_PRIOR: f64 = 0.01;
pub const L2_PENALTY: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
const MAX_NEWTON_STEPS: usize = 200;
const HEADER: &str = "# freqsv calibration v1";

/// One labelled calibration example.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTrial {
    pub score: f64,
    pub qms: Vec<f64>,
    pub target: bool,
}

/// `llr = bias + score_weight * s + sum_k qm_weights[k] * q_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationModel {
    pub bias: f64,
    pub score_weight: f64,
    pub measures: Vec<QualityMeasure>,
    pub qm_weights: Vec<f64>,
    pub prior: f64,
    /// Training objective at the optimum.
    pub objective: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    trials: &'a [CalibrationTrial],
    dim: usize,
    target_weight: f64,
    nontarget_weight: f64,
    prior_logit: f64,
}

impl Problem<'_> {
    fn features(&self, t: &CalibrationTrial) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim);
        x[0] = 1.0;
        x[1] = t.score;
        for (k, q) in t.qms.iter().enumerate() {
            x[2 + k] = *q;
        }
        x
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let data: f64 = self
            .trials
            .iter()
            .map(|t| {
                let z = theta.dot(&self.features(t)) + self.prior_logit;
                if t.target {
                    self.target_weight * softplus(-z)
                } else {
                    self.nontarget_weight * softplus(z)
                }
            })
            .sum();
        data + L2_PENALTY * theta.rows(1, self.dim - 1).norm_squared()
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(self.dim);
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for t in self.trials {
            let x = self.features(t);
            let z = theta.dot(&x) + self.prior_logit;
            let p = sigmoid(z);
            let (w, r) = if t.target {
                (self.target_weight, p - 1.0)
            } else {
                (self.nontarget_weight, p)
            };
            g.axpy(w * r, &x, 1.0);
            h.ger(w * p * (1.0 - p), &x, &x, 1.0);
        }
        for j in 1..self.dim {
            g[j] += 2.0 * L2_PENALTY * theta[j];
            h[(j, j)] += 2.0 * L2_PENALTY;
        }
        (g, h)
    }
}

fn problem<'a>(trials: &'a [CalibrationTrial], n_qms: usize, prior: f64) -> Result<Problem<'a>> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::Parameter(format!("prior {prior} outside (0, 1)")));
    }
    if let Some(t) = trials.iter().find(|t| t.qms.len() != n_qms) {
        return Err(Error::Dimension(format!("trial has {} quality measures, expected {n_qms}", t.qms.len())));
    }
    let n_tar = trials.iter().filter(|t| t.target).count();
    let n_non = trials.len() - n_tar;
    Ok(Problem {
        trials,
        dim: 2 + n_qms,
        target_weight: prior / n_tar.max(1) as f64,
        nontarget_weight: (1.0 - prior) / n_non.max(1) as f64,
        prior_logit: (prior / (1.0 - prior)).ln(),
    })
}

/// Per-column centring and scaling of the non-bias features; constant
/// columns map to zero.
fn standardize(trials: &[CalibrationTrial], n_qms: usize) -> (Vec<CalibrationTrial>, Vec<(f64, f64)>) {
    let n = trials.len() as f64;
    let column = |t: &CalibrationTrial, j: usize| if j == 0 { t.score } else { t.qms[j - 1] };
    let moments: Vec<(f64, f64)> = (0..=n_qms)
        .map(|j| {
            let mean = trials.iter().map(|t| column(t, j)).sum::<f64>() / n;
            let var = trials.iter().map(|t| (column(t, j) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect();
    let scaled = |t: &CalibrationTrial, j: usize| {
        let (m, s) = moments[j];
        if s > 0.0 {
            (column(t, j) - m) / s
        } else {
            0.0
        }
    };
    let out = trials
        .iter()
        .map(|t| CalibrationTrial {
            score: scaled(t, 0),
            qms: (1..=n_qms).map(|j| scaled(t, j)).collect(),
            target: t.target,
        })
        .collect();
    (out, moments)
}

/// Fits the calibration weights by damped Newton iterations on
/// standardized features until the gradient norm drops below
/// [`GRADIENT_TOLERANCE`].
pub fn calibrate_train(trials: &[CalibrationTrial], measures: &[QualityMeasure], prior: f64) -> Result<CalibrationModel> {
    let n_tar = trials.iter().filter(|t| t.target).count();
    if n_tar == 0 || n_tar == trials.len() {
        return Err(Error::Training("calibration needs both target and nontarget trials".into()));
    }
    problem(trials, measures.len(), prior)?;
    let (scaled, moments) = standardize(trials, measures.len());
    let p = problem(&scaled, measures.len(), prior)?;
    let mut theta = DVector::zeros(p.dim);
    let mut value = p.objective(&theta);
    let mut converged = false;
    for _ in 0..MAX_NEWTON_STEPS {
        let (g, h) = p.gradient_hessian(&theta);
        if g.norm() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let step = h.cholesky().map(|c| c.solve(&g)).unwrap_or_else(|| g.clone());
        let slope = g.dot(&step);
        let mut alpha = 1.0;
        loop {
            let candidate = &theta - alpha * &step;
            let v = p.objective(&candidate);
            if v <= value - 1e-4 * alpha * slope || alpha < 1e-12 {
                theta = candidate;
                value = v;
                break;
            }
            alpha *= 0.5;
        }
        if !value.is_finite() {
            return Err(Error::Training("calibration objective became non-finite".into()));
        }
    }
    if !converged {
        let (g, _) = p.gradient_hessian(&theta);
        if g.norm() >= GRADIENT_TOLERANCE {
            return Err(Error::Training(format!("calibration did not converge, gradient norm {:e}", g.norm())));
        }
    }
    let unscale = |j: usize| {
        let (m, s) = moments[j];
        if s > 0.0 {
            (theta[1 + j] / s, theta[1 + j] * m / s)
        } else {
            (0.0, 0.0)
        }
    };
    let weights: Vec<(f64, f64)> = (0..=measures.len()).map(unscale).collect();
    let mut model = CalibrationModel {
        bias: theta[0] - weights.iter().map(|w| w.1).sum::<f64>(),
        score_weight: weights[0].0,
        measures: measures.to_vec(),
        qm_weights: weights[1..].iter().map(|w| w.0).collect(),
        prior,
        objective: 0.0,
    };
    model.objective = model.objective_on(trials)?;
    Ok(model)
}

impl CalibrationModel {
    pub fn apply(&self, raw: f64, qms: &[f64]) -> Result<f64> {
        if qms.len() != self.qm_weights.len() {
            return Err(Error::Input(format!(
                "model expects {} quality measures, got {}",
                self.qm_weights.len(),
                qms.len()
            )));
        }
        Ok(self.bias + self.score_weight * raw + self.qm_weights.iter().zip(qms).map(|(w, q)| w * q).sum::<f64>())
    }

    /// Value of the training objective of this model on `trials`.
    pub fn objective_on(&self, trials: &[CalibrationTrial]) -> Result<f64> {
        let p = problem(trials, self.qm_weights.len(), self.prior)?;
        let mut theta = DVector::zeros(p.dim);
        theta[0] = self.bias;
        theta[1] = self.score_weight;
        for (k, w) in self.qm_weights.iter().enumerate() {
            theta[2 + k] = *w;
        }
        Ok(p.objective(&theta))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\nprior {}\nbias {}\nscore {}\n", self.prior, self.bias, self.score_weight);
        for (q, w) in self.measures.iter().zip(&self.qm_weights) {
            let _ = writeln!(s, "qm {} {}", q.name(), w);
        }
        let _ = writeln!(s, "objective {}", self.objective);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Input(format!("bad calibration line `{line}`"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Input("missing calibration header".into()));
        }
        let (mut prior, mut bias, mut score, mut objective) = (None, None, None, None);
        let (mut measures, mut qm_weights) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let number = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            match fields.as_slice() {
                ["prior", v] => prior = Some(number(v)?),
                ["bias", v] => bias = Some(number(v)?),
                ["score", v] => score = Some(number(v)?),
                ["objective", v] => objective = Some(number(v)?),
                ["qm", name, v] => {
                    measures.push(name.parse()?);
                    qm_weights.push(number(v)?);
                }
                _ => return Err(bad(line)),
            }
        }
        let missing = |what: &str| Error::Input(format!("calibration file lacks `{what}`"));
        Ok(CalibrationModel {
            bias: bias.ok_or_else(|| missing("bias"))?,
            score_weight: score.ok_or_else(|| missing("score"))?,
            measures,
            qm_weights,
            prior: prior.ok_or_else(|| missing("prior"))?,
            objective: objective.ok_or_else(|| missing("objective"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        CalibrationModel::from_text(&std::fs::read_to_string(path)?)
    }
}
