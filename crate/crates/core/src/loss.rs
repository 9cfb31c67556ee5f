//! Additive angular margin softmax with optional sub-centers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{l2_normalize, Ctx, DecayGroup, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scoring::SpeakerEmbedding;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AamConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
    pub sub_centers: usize,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            margin: 0.2,
            scale: 30.0,
            sub_centers: 1,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sub_centers == 0 {
            return Err(Error::Config("at least one sub-center per speaker".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

/// Classification head holding `speakers * sub_centers` prototype rows.
#[derive(Clone, Debug)]
pub struct AamHead {
    pub prototypes: ParamId,
    pub speakers: usize,
    pub dim: usize,
    pub cfg: AamConfig,
}

impl AamHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, speakers: usize, dim: usize, cfg: AamConfig) -> Result<Self> {
        cfg.validate()?;
        if speakers == 0 || dim == 0 {
            return Err(Error::Config("AAM head needs speakers and a dimension".into()));
        }
        let init = Init { rng }.he(&[speakers * cfg.sub_centers, dim], dim);
        Ok(AamHead {
            prototypes: store.add("aam.prototypes", init, DecayGroup::Head),
            speakers,
            dim,
            cfg,
        })
    }

    /// Per-speaker cosines `(N, S)`: the best of each speaker's sub-centers.
    pub fn cosines<'t>(&self, ctx: &mut Ctx<'t, '_>, emb: Var<'t>) -> Result<Var<'t>> {
        let shape = emb.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Dimension(format!("AAM head over dim {} got {shape:?}", self.dim)));
        }
        let e = l2_normalize(emb)?;
        let w = l2_normalize(ctx.p(self.prototypes))?;
        let cos = e.linear(&w, None)?;
        let k = self.cfg.sub_centers;
        if k == 1 {
            return Ok(cos);
        }
        cos.reshape(&[shape[0], self.speakers, k])?
            .max_axis(2)?
            .reshape(&[shape[0], self.speakers])
    }

    /// Scaled logits with the margin applied to each row's target.
    pub fn logits<'t>(&self, ctx: &mut Ctx<'t, '_>, emb: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
        let cos = self.cosines(ctx, emb)?;
        Ok(cos.angular_margin(targets, self.cfg.margin)?.scale(self.cfg.scale))
    }

    /// Mean cross-entropy over the batch, with the logits for accuracy.
    pub fn loss<'t>(&self, ctx: &mut Ctx<'t, '_>, emb: Var<'t>, targets: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        let logits = self.logits(ctx, emb, targets)?;
        Ok((logits.cross_entropy(targets)?, logits))
    }
}

/// Logits of a single embedding against fixed prototype rows, grouped as
/// `sub_centers` consecutive rows per speaker.
pub fn aam_logits(emb: &SpeakerEmbedding, prototypes: &Tensor, cfg: &AamConfig, target: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let &[rows, dim] = prototypes.shape() else {
        return Err(Error::Dimension(format!("prototypes must be (S*K, D), got {:?}", prototypes.shape())));
    };
    if dim != emb.dim() || rows % cfg.sub_centers != 0 {
        return Err(Error::Dimension(format!(
            "prototypes {:?} do not fit dim {} with {} sub-centers",
            prototypes.shape(),
            emb.dim(),
            cfg.sub_centers
        )));
    }
    let speakers = rows / cfg.sub_centers;
    if target >= speakers {
        return Err(Error::Input(format!("target {target} out of range for {speakers} speakers")));
    }
    let e = emb.normalized()?;
    let cosines: Vec<f64> = prototypes
        .data()
        .chunks(dim)
        .map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter().zip(e.vector()).map(|(w, x)| w * x).sum::<f64>() / norm
        })
        .collect();
    Ok(cosines
        .chunks(cfg.sub_centers)
        .enumerate()
        .map(|(s, c)| {
            let best = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let adjusted = if s == target {
                crate::tensor::margin_value(best, cfg.margin)
            } else {
                best
            };
            cfg.scale * adjusted
        })
        .collect())
}

/// `-log softmax(logits)[target]` with max subtraction.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Input(format!("target {target} out of range for {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}
