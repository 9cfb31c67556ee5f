//! 2D convolutional stem placed in front of the ECAPA TDNN layers.
//!
//! Layout: conv(1 -> C, stride 2 in frequency) -> BN -> ReLU, one residual
//! 2D block (two C -> C convs with a skip connection), conv(C -> C, stride 2
//! in frequency) -> BN -> ReLU, then the channel and frequency axes are
//! flattened into a single TDNN channel axis of `C * F / 4`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d};
use super::params::{Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Frequency strides of the first and the last stem convolution.
    pub freq_strides: (usize, usize),
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            channels: 128,
            kernel: 3,
            freq_strides: (2, 2),
        }
    }
}

impl StemConfig {
    pub fn freq_reduction(&self) -> usize {
        self.freq_strides.0 * self.freq_strides.1
    }

    pub fn output_channels(&self, n_mels: usize) -> usize {
        self.channels * n_mels / self.freq_reduction()
    }

    pub fn validate(&self, n_mels: usize) -> Result<()> {
        if self.channels == 0 || self.kernel == 0 || self.freq_strides.0 == 0 || self.freq_strides.1 == 0 {
            return Err(Error::Config(format!("degenerate stem config {self:?}")));
        }
        if !n_mels.is_multiple_of(self.freq_reduction()) {
            return Err(Error::Config(format!(
                "stem needs the frequency extent {n_mels} to be divisible by {}",
                self.freq_reduction()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvStem {
    pub cfg: StemConfig,
    pub n_mels: usize,
    conv_in: Conv2d,
    bn_in: BatchNorm,
    res_a: Conv2d,
    bn_a: BatchNorm,
    res_b: Conv2d,
    bn_b: BatchNorm,
    conv_out: Conv2d,
    bn_out: BatchNorm,
}

impl ConvStem {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<'_, R>,
        name: &str,
        cfg: StemConfig,
        n_mels: usize,
    ) -> Result<Self> {
        cfg.validate(n_mels)?;
        let (c, k) = (cfg.channels, (cfg.kernel, cfg.kernel));
        let conv = |store: &mut ParamStore, init: &mut Init<'_, R>, part: &str, c_in, stride| {
            Conv2d::new(store, init, &format!("{name}.{part}"), c_in, c, k, stride, false)
        };
        let conv_in = conv(store, init, "conv_in", 1, (cfg.freq_strides.0, 1));
        let bn_in = BatchNorm::new(store, &format!("{name}.bn_in"), c);
        let res_a = conv(store, init, "res_a", c, (1, 1));
        let bn_a = BatchNorm::new(store, &format!("{name}.bn_a"), c);
        let res_b = conv(store, init, "res_b", c, (1, 1));
        let bn_b = BatchNorm::new(store, &format!("{name}.bn_b"), c);
        let conv_out = conv(store, init, "conv_out", c, (cfg.freq_strides.1, 1));
        let bn_out = BatchNorm::new(store, &format!("{name}.bn_out"), c);
        Ok(ConvStem {
            cfg,
            n_mels,
            conv_in,
            bn_in,
            res_a,
            bn_a,
            res_b,
            bn_b,
            conv_out,
            bn_out,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.cfg.output_channels(self.n_mels)
    }

    /// `(N, F, T)` log-mel features to `(N, C * F / 4, T)`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let &[n, f, t] = shape.as_slice() else {
            return Err(Error::Dimension(format!("stem input must be (N, F, T), got {shape:?}")));
        };
        if f != self.n_mels {
            return Err(Error::Config(format!("stem built for {} bins, got {f}", self.n_mels)));
        }
        let x = x.reshape(&[n, 1, f, t])?;
        let h = self.conv_in.forward(ctx, x)?;
        let h = self.bn_in.forward(ctx, h)?.relu();
        let r = self.res_a.forward(ctx, h)?;
        let r = self.bn_a.forward(ctx, r)?.relu();
        let r = self.res_b.forward(ctx, r)?;
        let r = self.bn_b.forward(ctx, r)?;
        let h = h.add(&r)?.relu();
        let h = self.conv_out.forward(ctx, h)?;
        let h = self.bn_out.forward(ctx, h)?.relu();
        let s = h.shape();
        h.reshape(&[n, s[1] * s[2], s[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::gradcheck::{check_block, GradCheckOptions};
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stem(cfg: StemConfig, n_mels: usize) -> (ConvStem, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ConvStem::new(&mut store, &mut Init { rng: &mut rng }, "stem", cfg, n_mels).unwrap();
        (s, store)
    }

    #[test]
    fn eighty_bins_and_128_channels_give_2560() {
        let (s, mut store) = stem(StemConfig::default(), 80);
        assert_eq!(s.output_channels(), 2560);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, false);
        let y = s.forward(&mut ctx, tape.constant(Tensor::full(&[1, 80, 3], 0.5))).unwrap();
        assert_eq!(y.shape(), vec![1, 2560, 3]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = StemConfig {
            channels: 4,
            ..StemConfig::default()
        };
        let (s, mut store) = stem(cfg, 16);
        for train in [true, false] {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &mut store, train);
            let y = s.forward(&mut ctx, tape.constant(Tensor::zeros(&[2, 16, 5]))).unwrap().value();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_frequency_is_a_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ConvStem::new(&mut store, &mut Init { rng: &mut rng }, "stem", StemConfig::default(), 82);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = StemConfig {
            channels: 4,
            ..StemConfig::default()
        };
        let (s, mut store) = stem(cfg, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn(&[1, 16, 8], |_| rng.gen_range(-1.0..1.0));
        let r = check_block(&mut store, &x, GradCheckOptions::default(), |ctx, v| s.forward(ctx, v)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
