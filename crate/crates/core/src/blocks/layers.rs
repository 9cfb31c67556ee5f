//! Parameterized primitives: affine layers, convolutions and batch norm.

use rand::Rng;

use super::params::{Ctx, DecayGroup, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(&format!("{name}.weight"), init.he(&[d_out, d_in], d_in), DecayGroup::Body);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]), DecayGroup::Body);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(&ctx.p(self.weight), Some(&ctx.p(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        with_bias: bool,
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let k = store.add(
            &format!("{name}.weight"),
            init.he(&[c_out, c_in, kernel.0, kernel.1], fan_in),
            DecayGroup::Body,
        );
        let bias = with_bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]), DecayGroup::Body));
        Conv2d {
            kernel: k,
            bias,
            stride,
            padding: Padding::Same,
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let bias = self.bias.map(|b| ctx.p(b));
        x.conv2d(&ctx.p(self.kernel), bias.as_ref(), self.stride, (1, 1), self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv1d {
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
        let kernel = store.add(&format!("{name}.weight"), init.he(&[c_out, c_in, k], c_in * k), DecayGroup::Body);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]), DecayGroup::Body);
        Conv1d {
            kernel,
            bias,
            dilation,
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d(&ctx.p(self.kernel), Some(&ctx.p(self.bias)), self.dilation)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Batch normalization over every axis except the channel axis 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0), DecayGroup::Body),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), DecayGroup::Body),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            channels,
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::Dimension(format!(
                "batch norm over {} channels got input {shape:?}",
                self.channels
            )));
        }
        let mut stat_shape = vec![1; shape.len()];
        stat_shape[1] = self.channels;
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let count = x.value().len() / self.channels;

        let (centered, inv_std) = if ctx.train {
            let mean = x.mean(&axes)?;
            let centered = x.sub_bcast(&mean)?;
            let var = centered.square().mean(&axes)?;
            let inv_std = var.offset(BN_EPSILON).sqrt()?.recip()?;
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let (mv, vv) = (mean.value(), var.value());
            let rm = ctx.store.get_mut(self.running_mean).data_mut();
            rm.iter_mut()
                .zip(mv.data())
                .for_each(|(r, m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            let rv = ctx.store.get_mut(self.running_var).data_mut();
            rv.iter_mut()
                .zip(vv.data())
                .for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias);
            (centered, inv_std)
        } else {
            let rm = ctx.store.get(self.running_mean).reshape(&stat_shape)?;
            let rv = ctx.store.get(self.running_var);
            let inv = Tensor::new(
                &stat_shape,
                rv.data().iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect(),
            )?;
            let centered = x.sub_bcast(&ctx.tape.constant(rm))?;
            (centered, ctx.tape.constant(inv))
        };
        let gamma = ctx.p(self.gamma).reshape(&stat_shape)?;
        let beta = ctx.p(self.beta).reshape(&stat_shape)?;
        centered.mul_bcast(&inv_std)?.mul_bcast(&gamma)?.add_bcast(&beta)
    }
}

/// Row-wise L2 normalization along the trailing axis. A tiny constant under
/// the root keeps the map differentiable at the origin.
pub fn l2_normalize<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let axis = x.shape().len() - 1;
    let norm = x.square().sum(&[axis])?.offset(1e-30).sqrt()?;
    x.mul_bcast(&norm.recip()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_train_normalizes_and_tracks_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 20.0]).unwrap();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, true);
        let y = bn.forward(&mut ctx, tape.constant(x)).unwrap().value();
        // channel 0 values {1,3,5,7}: mean 4, var 5
        let expect = (1.0 - 4.0) / (5.0f64 + BN_EPSILON).sqrt();
        assert!((y.get(&[0, 0, 0]) - expect).abs() < 1e-12);
        let rm = store.get(bn.running_mean).data().to_vec();
        assert!((rm[0] - 0.4).abs() < 1e-12 && (rm[1] - 1.5).abs() < 1e-12);
        let rv = store.get(bn.running_var).data().to_vec();
        assert!((rv[0] - (0.9 + 0.1 * 5.0 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.get_mut(bn.running_mean).data_mut()[0] = 2.0;
        store.get_mut(bn.running_var).data_mut()[0] = 4.0;
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, false);
        let y = bn
            .forward(&mut ctx, tape.constant(Tensor::full(&[1, 1, 3], 6.0)))
            .unwrap()
            .value();
        let expect = 4.0 / (4.0f64 + BN_EPSILON).sqrt();
        assert!(y.data().iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn l2_normalize_rows() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::from_fn(&[3, 5], |_| rng.gen_range(-1.0..1.0)));
        let y = l2_normalize(x).unwrap().value();
        for row in y.data().chunks(5) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }
}
