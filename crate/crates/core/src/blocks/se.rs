//! Squeeze-excitation variants and learnable frequency positional encodings.
//!
//! Feature maps follow the `(N, C, F, T)` layout (batch, channel, frequency,
//! time). The frequency-domain blocks also accept unbatched `(C, F, T)`
//! inputs; the channel-wise [`SeBlock`] needs the batch axis because it also
//! serves the 1D TDNN layout `(N, C, T)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Ctx, DecayGroup, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// A `(C, F, T)` tensor: channels, frequency bins, time frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Dimension(format!(
                "feature map must be (C, F, T), got {:?}",
                t.shape()
            )));
        }
        Ok(FeatureMap(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn freq(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn time(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Width of the excitation bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    Fixed(usize),
    /// Input dimension divided by this factor (at least 1).
    Divisor(usize),
}

impl Bottleneck {
    pub fn resolve(self, input_dim: usize) -> usize {
        match self {
            Bottleneck::Fixed(n) => n.max(1),
            Bottleneck::Divisor(d) => (input_dim / d.max(1)).max(1),
        }
    }
}

/// Adds a leading batch axis to an unbatched input; returns the batched
/// view and whether it needs to be undone.
fn batched<'t>(x: Var<'t>, batched_rank: usize) -> Result<(Var<'t>, bool)> {
    let shape = x.shape();
    if shape.len() == batched_rank {
        Ok((x, false))
    } else if shape.len() + 1 == batched_rank {
        let mut s = vec![1];
        s.extend_from_slice(&shape);
        Ok((x.reshape(&s)?, true))
    } else {
        Err(Error::Dimension(format!(
            "expected rank {} or {batched_rank}, got {shape:?}",
            batched_rank - 1
        )))
    }
}

fn unbatched<'t>(x: Var<'t>, undo: bool) -> Result<Var<'t>> {
    if undo {
        let shape = x.shape();
        x.reshape(&shape[1..])
    } else {
        Ok(x)
    }
}

/// Two-layer excitation `sigmoid(W2 relu(W1 z + b1) + b2)` over rows of `z`.
#[derive(Clone, Debug)]
pub struct Excitation {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Excitation {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, name: &str, dim: usize, bottleneck: usize) -> Self {
        Excitation {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, bottleneck),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), bottleneck, dim),
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, z)?.relu();
        Ok(self.fc2.forward(ctx, h)?.sigmoid())
    }
}

/// Channel-wise squeeze-excitation: one scale per feature map.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub excitation: Excitation,
    pub channels: usize,
}

impl SeBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        bottleneck: Bottleneck,
    ) -> Self {
        SeBlock {
            excitation: Excitation::new(store, init, name, channels, bottleneck.resolve(channels)),
            channels,
        }
    }

    /// Per-channel scales `(N, C)`, each in (0, 1).
    pub fn scales<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() < 3 || shape[1] != self.channels {
            return Err(Error::Dimension(format!(
                "SE over {} channels got {shape:?}",
                self.channels
            )));
        }
        let axes: Vec<usize> = (2..shape.len()).collect();
        let z = x.mean(&axes)?.reshape(&[shape[0], self.channels])?;
        self.excitation.forward(ctx, z)
    }

    /// Accepts batched `(N, C, T)` or `(N, C, F, T)` inputs.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let s = self.scales(ctx, x)?;
        let mut bshape = vec![1; shape.len()];
        bshape[0] = shape[0];
        bshape[1] = self.channels;
        x.mul_bcast(&s.reshape(&bshape)?)
    }
}

/// Frequency-wise squeeze-excitation: the squeeze averages over channels and
/// time for every frequency bin, and each frequency slice of the feature map
/// is rescaled by its own excitation scalar.
#[derive(Clone, Debug)]
pub struct FwSeBlock {
    pub excitation: Excitation,
    pub freq: usize,
}

impl FwSeBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, name: &str, freq: usize, bottleneck: Bottleneck) -> Self {
        FwSeBlock {
            excitation: Excitation::new(store, init, name, freq, bottleneck.resolve(freq)),
            freq,
        }
    }

    /// Squeeze descriptor `z` of shape `(N, F)`: mean over channel and time.
    pub fn squeeze<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let (x, _) = batched(x, 4)?;
        let shape = x.shape();
        if shape[2] != self.freq {
            return Err(Error::Dimension(format!(
                "fwSE over {} frequency bins got {shape:?}",
                self.freq
            )));
        }
        x.mean(&[1, 3])?.reshape(&[shape[0], self.freq])
    }

    /// Per-frequency scales `(N, F)`, each in (0, 1).
    pub fn scales<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let z = self.squeeze(x)?;
        self.excitation.forward(ctx, z)
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (x, undo) = batched(x, 4)?;
        let n = x.shape()[0];
        let s = self.scales(ctx, x)?.reshape(&[n, 1, self.freq, 1])?;
        unbatched(x.mul_bcast(&s)?, undo)
    }
}

/// Trainable per-frequency offset `p` broadcast over channels and time.
#[derive(Clone, Debug)]
pub struct FreqPositionalEncoding {
    pub p: ParamId,
    pub freq: usize,
}

impl FreqPositionalEncoding {
    /// Zero-initialized, so a fresh encoding is the identity.
    pub fn new(store: &mut ParamStore, name: &str, freq: usize) -> Self {
        FreqPositionalEncoding {
            p: store.add(&format!("{name}.p"), Tensor::zeros(&[freq]), DecayGroup::Body),
            freq,
        }
    }

    /// `out[.., c, f, t] = x[.., c, f, t] + p[f]`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (x, undo) = batched(x, 4)?;
        if x.shape()[2] != self.freq {
            return Err(Error::Dimension(format!(
                "positional encoding of length {} added to {:?}",
                self.freq,
                x.shape()
            )));
        }
        let p = ctx.p(self.p).reshape(&[1, 1, self.freq, 1])?;
        unbatched(x.add_bcast(&p)?, undo)
    }
}
