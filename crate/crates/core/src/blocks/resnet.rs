//! Basic residual blocks for the 2D ResNet trunk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d};
use super::params::{Ctx, Init, ParamStore};
use super::se::{Bottleneck, FreqPositionalEncoding, FwSeBlock, SeBlock};
use crate::error::Result;
use crate::tensor::Var;

/// Which excitation closes the residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Excite {
    None,
    Channel,
    Frequency,
}

#[derive(Clone, Debug)]
enum Excitation {
    None,
    Channel(SeBlock),
    Frequency(FwSeBlock),
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub pos_enc: Option<FreqPositionalEncoding>,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    excite: Excitation,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

/// Shape parameters of one residual block.
#[derive(Clone, Copy, Debug)]
pub struct ResBlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    /// Frequency extent of the block input.
    pub freq_in: usize,
    pub stride: usize,
    pub excite: Excite,
    pub bottleneck: Bottleneck,
    pub pos_enc: bool,
}

impl ResBlockSpec {
    pub fn freq_out(&self) -> usize {
        self.freq_in.div_ceil(self.stride)
    }
}

impl ResBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, name: &str, spec: ResBlockSpec) -> Self {
        let s = (spec.stride, spec.stride);
        let pos_enc = spec
            .pos_enc
            .then(|| FreqPositionalEncoding::new(store, &format!("{name}.pos_enc"), spec.freq_in));
        let conv1 = Conv2d::new(store, init, &format!("{name}.conv1"), spec.c_in, spec.c_out, (3, 3), s, false);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), spec.c_out);
        let conv2 = Conv2d::new(store, init, &format!("{name}.conv2"), spec.c_out, spec.c_out, (3, 3), (1, 1), false);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), spec.c_out);
        let excite = match spec.excite {
            Excite::None => Excitation::None,
            Excite::Channel => Excitation::Channel(SeBlock::new(store, init, &format!("{name}.se"), spec.c_out, spec.bottleneck)),
            Excite::Frequency => Excitation::Frequency(FwSeBlock::new(
                store,
                init,
                &format!("{name}.fwse"),
                spec.freq_out(),
                spec.bottleneck,
            )),
        };
        let shortcut = (spec.stride != 1 || spec.c_in != spec.c_out).then(|| {
            (
                Conv2d::new(store, init, &format!("{name}.shortcut"), spec.c_in, spec.c_out, (1, 1), s, false),
                BatchNorm::new(store, &format!("{name}.shortcut_bn"), spec.c_out),
            )
        });
        ResBlock {
            pos_enc,
            conv1,
            bn1,
            conv2,
            bn2,
            excite,
            shortcut,
        }
    }

    /// `(N, C_in, F, T)` to `(N, C_out, F', T')`. The positional encoding is
    /// added to the residual branch only, after the skip path has branched
    /// off; the excitation rescales the branch before the skip addition.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let branch = match &self.pos_enc {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let h = self.conv1.forward(ctx, branch)?;
        let h = self.bn1.forward(ctx, h)?.relu();
        let h = self.conv2.forward(ctx, h)?;
        let mut h = self.bn2.forward(ctx, h)?;
        h = match &self.excite {
            Excitation::None => h,
            Excitation::Channel(se) => se.forward(ctx, h)?,
            Excitation::Frequency(fwse) => fwse.forward(ctx, h)?,
        };
        Ok(h.add(&skip)?.relu())
    }
}
