//! Frame-level TDNN blocks and attentive statistics pooling, all on the
//! `(N, C, T)` layout.

use rand::Rng;

use super::layers::{BatchNorm, Conv1d};
use super::params::{Ctx, Init, ParamStore};
use super::se::{Bottleneck, SeBlock};
use crate::error::{Error, Result};
use crate::tensor::{Var, STD_EPSILON};

/// Conv1d -> ReLU -> BN.
#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub conv: Conv1d,
    pub bn: BatchNorm,
}

impl TdnnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        TdnnLayer {
            conv: Conv1d::new(store, init, &format!("{name}.conv"), c_in, c_out, k, dilation),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv.forward(ctx, x)?.relu();
        self.bn.forward(ctx, h)
    }
}

/// Res2Net-style block: 1x1 projection, `scale` channel groups processed by
/// cascaded dilated k=3 convolutions where each group also receives the
/// previous group's output, 1x1 projection, optional SE, residual skip.
#[derive(Clone, Debug)]
pub struct Res2DilatedBlock {
    pub channels: usize,
    pub scale: usize,
    pub conv_in: TdnnLayer,
    pub groups: Vec<TdnnLayer>,
    pub conv_out: TdnnLayer,
    pub se: Option<SeBlock>,
}

impl Res2DilatedBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        scale: usize,
        dilation: usize,
        se: Option<Bottleneck>,
    ) -> Result<Self> {
        if scale == 0 || !channels.is_multiple_of(scale) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {scale} groups"
            )));
        }
        let width = channels / scale;
        let conv_in = TdnnLayer::new(store, init, &format!("{name}.conv_in"), channels, channels, 1, 1);
        let groups = (0..scale)
            .map(|i| TdnnLayer::new(store, init, &format!("{name}.group{i}"), width, width, 3, dilation))
            .collect();
        let conv_out = TdnnLayer::new(store, init, &format!("{name}.conv_out"), channels, channels, 1, 1);
        let se = se.map(|b| SeBlock::new(store, init, &format!("{name}.se"), channels, b));
        Ok(Res2DilatedBlock {
            channels,
            scale,
            conv_in,
            groups,
            conv_out,
            se,
        })
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::Dimension(format!(
                "Res2 block over {} channels got {shape:?}",
                self.channels
            )));
        }
        let width = self.channels / self.scale;
        let h = self.conv_in.forward(ctx, x)?;
        let mut outs = Vec::with_capacity(self.scale);
        let mut prev: Option<Var<'t>> = None;
        for (i, group) in self.groups.iter().enumerate() {
            let part = h.slice(1, i * width, width)?;
            let input = match prev {
                Some(p) => part.add(&p)?,
                None => part,
            };
            let y = group.forward(ctx, input)?;
            outs.push(y);
            prev = Some(y);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.tape.concat(&outs, 1)? };
        let mut o = self.conv_out.forward(ctx, cat)?;
        if let Some(se) = &self.se {
            o = se.forward(ctx, o)?;
        }
        o.add(&x)
    }
}

/// Channel- and context-dependent attentive statistics pooling.
///
/// Attention logits come from a 1x1 tanh network applied to every frame
/// concatenated with the utterance-level mean and standard deviation; a
/// softmax over time then weights the first and second moments per channel.
#[derive(Clone, Debug)]
pub struct AttentiveStatsPool {
    pub channels: usize,
    pub attention: Conv1d,
    pub logits: Conv1d,
}

impl AttentiveStatsPool {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Self {
        AttentiveStatsPool {
            channels,
            attention: Conv1d::new(store, init, &format!("{name}.attention"), 3 * channels, hidden, 1, 1),
            logits: Conv1d::new(store, init, &format!("{name}.logits"), hidden, channels, 1, 1),
        }
    }

    /// Attention weights `(N, C, T)`, summing to one over time.
    pub fn weights<'t>(&self, ctx: &mut Ctx<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let shape = h.shape();
        let &[_, c, t] = shape.as_slice() else {
            return Err(Error::Dimension(format!("pooling input must be (N, C, T), got {shape:?}")));
        };
        if c != self.channels {
            return Err(Error::Dimension(format!("pooling over {} channels got {c}", self.channels)));
        }
        if t < 2 {
            return Err(Error::Input(format!("attentive pooling needs at least 2 frames, got {t}")));
        }
        let mean = h.mean(&[2])?.broadcast_to(&shape)?;
        let std = h.std(&[2])?.broadcast_to(&shape)?;
        let context = ctx.tape.concat(&[h, mean, std], 1)?;
        let a = self.attention.forward(ctx, context)?.tanh();
        self.logits.forward(ctx, a)?.softmax(2)
    }

    /// `(N, C, T)` frames to `(N, 2C)`: weighted mean then weighted std.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let alpha = self.weights(ctx, h)?;
        weighted_stats(h, alpha)
    }
}

/// Weighted mean and standard deviation over time, concatenated per row.
pub fn weighted_stats<'t>(h: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let shape = h.shape();
    let mu = alpha.mul(&h)?.sum(&[2])?;
    let centered = h.sub_bcast(&mu)?;
    let sigma = alpha.mul(&centered.square())?.sum(&[2])?.offset(STD_EPSILON).sqrt()?;
    let tape = h.tape();
    tape.concat(&[mu, sigma], 1)?.reshape(&[shape[0], 2 * shape[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::gradcheck::{check_block, GradCheckOptions};
    use crate::blocks::layers::BN_EPSILON;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn eval<F>(store: &mut ParamStore, x: &Tensor, f: F) -> Tensor
    where
        F: for<'t, 's> Fn(&mut Ctx<'t, 's>, Var<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, store, false);
        (*f(&mut ctx, tape.constant(x.clone())).unwrap().value()).clone()
    }

    /// Zero-padded "same" 1D convolution over `(C, T)` rows.
    fn conv1d_oracle(x: &[Vec<f64>], w: &Tensor, b: &Tensor, dilation: usize) -> Vec<Vec<f64>> {
        let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let t = x[0].len();
        let half = dilation * (k - 1) / 2;
        (0..c_out)
            .map(|o| {
                (0..t)
                    .map(|ti| {
                        let mut acc = b.data()[o];
                        for i in 0..c_in {
                            for j in 0..k {
                                let src = ti as isize + (j * dilation) as isize - half as isize;
                                if src >= 0 && (src as usize) < t {
                                    acc += w.get(&[o, i, j]) * x[i][src as usize];
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    /// Conv -> ReLU -> BN with default running statistics.
    fn tdnn_oracle(store: &ParamStore, layer: &TdnnLayer, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let y = conv1d_oracle(x, store.get(layer.conv.kernel), store.get(layer.conv.bias), layer.conv.dilation);
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        y.into_iter().map(|row| row.into_iter().map(|v| v.max(0.0) * scale).collect()).collect()
    }

    fn rows(x: &Tensor) -> Vec<Vec<f64>> {
        let t = x.shape()[2];
        x.data().chunks(t).map(|r| r.to_vec()).collect()
    }

    fn block(channels: usize, scale: usize, dilation: usize, seed: u64) -> (Res2DilatedBlock, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Res2DilatedBlock::new(&mut store, &mut Init { rng: &mut rng }, "b", channels, scale, dilation, Some(Bottleneck::Divisor(4)))
            .unwrap();
        (b, store)
    }

    #[test]
    fn zero_inner_convs_leave_the_skip_path() {
        let (b, mut store) = block(8, 4, 2, 1);
        for g in &b.groups {
            store.get_mut(g.conv.kernel).data_mut().fill(0.0);
        }
        let x = random(&[2, 8, 7], 3);
        for train in [false, true] {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &mut store, train);
            let y = b.forward(&mut ctx, tape.constant(x.clone())).unwrap().value();
            assert_eq!(*y, x);
        }
    }

    #[test]
    fn scale_one_is_a_plain_conv_block() {
        let (b, mut store) = block(6, 1, 3, 2);
        let se = b.se.clone();
        let mut plain = b.clone();
        plain.se = None;
        let x = random(&[1, 6, 9], 5);
        let y = eval(&mut store, &x, |ctx, v| plain.forward(ctx, v));
        let h = tdnn_oracle(&store, &b.conv_in, &rows(&x));
        let g = tdnn_oracle(&store, &b.groups[0], &h);
        let o = tdnn_oracle(&store, &b.conv_out, &g);
        let xr = rows(&x);
        for c in 0..6 {
            for t in 0..9 {
                assert!((y.get(&[0, c, t]) - (o[c][t] + xr[c][t])).abs() < 1e-12);
            }
        }
        assert!(se.is_some());
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Res2DilatedBlock::new(&mut store, &mut Init { rng: &mut rng }, "b", 6, 4, 1, None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn res2_gradients_match_finite_differences() {
        let (b, mut store) = block(8, 2, 2, 6);
        let x = random(&[2, 8, 6], 7);
        let r = check_block(&mut store, &x, GradCheckOptions::default(), |ctx, v| b.forward(ctx, v)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn pool(channels: usize, hidden: usize, seed: u64) -> (AttentiveStatsPool, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentiveStatsPool::new(&mut store, &mut Init { rng: &mut rng }, "pool", channels, hidden);
        (p, store)
    }

    #[test]
    fn constant_logits_give_plain_moments() {
        let (p, mut store) = pool(3, 4, 1);
        store.get_mut(p.logits.kernel).data_mut().fill(0.0);
        let x = random(&[2, 3, 5], 2);
        let y = eval(&mut store, &x, |ctx, v| p.forward(ctx, v));
        for n in 0..2 {
            for c in 0..3 {
                let row: Vec<f64> = (0..5).map(|t| x.get(&[n, c, t])).collect();
                let mean = row.iter().sum::<f64>() / 5.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                assert!((y.get(&[n, c]) - mean).abs() < 1e-12);
                assert!((y.get(&[n, 3 + c]) - (var + STD_EPSILON).sqrt()).abs() < 1e-12);
            }
        }
        let flat = eval(&mut store, &Tensor::full(&[1, 3, 4], 2.0), |ctx, v| p.forward(ctx, v));
        assert!((flat.get(&[0, 4]) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn pooling_matches_scalar_oracle() {
        let (c, a, t) = (3, 4, 6);
        let (p, mut store) = pool(c, a, 3);
        store.get_mut(p.attention.bias).data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        let x = random(&[1, c, t], 4);
        let y = eval(&mut store, &x, |ctx, v| p.forward(ctx, v));
        let h = rows(&x);
        let mut context = h.clone();
        for row in &h {
            let mean = row.iter().sum::<f64>() / t as f64;
            context.push(vec![mean; t]);
        }
        for row in &h {
            let mean = row.iter().sum::<f64>() / t as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            context.push(vec![(var + STD_EPSILON).sqrt(); t]);
        }
        let hidden: Vec<Vec<f64>> = conv1d_oracle(&context, store.get(p.attention.kernel), store.get(p.attention.bias), 1)
            .into_iter()
            .map(|r| r.into_iter().map(f64::tanh).collect())
            .collect();
        let logits = conv1d_oracle(&hidden, store.get(p.logits.kernel), store.get(p.logits.bias), 1);
        for ci in 0..c {
            let m = logits[ci].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits[ci].iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let alpha: Vec<f64> = e.iter().map(|v| v / z).collect();
            let mu: f64 = (0..t).map(|ti| alpha[ti] * h[ci][ti]).sum();
            let var: f64 = (0..t).map(|ti| alpha[ti] * (h[ci][ti] - mu).powi(2)).sum();
            assert!((y.get(&[0, ci]) - mu).abs() < 1e-12);
            assert!((y.get(&[0, c + ci]) - (var + STD_EPSILON).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_needs_two_frames() {
        let (p, mut store) = pool(2, 2, 0);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, false);
        let r = p.forward(&mut ctx, tape.constant(Tensor::zeros(&[1, 2, 1])));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        let (p, mut store) = pool(4, 3, 8);
        let x = random(&[2, 4, 7], 9);
        let r = check_block(&mut store, &x, GradCheckOptions::default(), |ctx, v| p.forward(ctx, v)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
