//! Central finite-difference checks of tape gradients for parameterized
//! blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Options of [`check_block`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Batch-norm mode used for both the analytic and numeric passes.
    pub train: bool,
    /// At most this many entries are probed per tensor, evenly strided.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            train: true,
            max_per_tensor: 64,
            seed: 7,
        }
    }
}

fn probes(len: usize, max: usize) -> impl Iterator<Item = usize> {
    let stride = len.div_ceil(max.max(1)).max(1);
    (0..len).step_by(stride)
}

/// Checks the gradients of `sum(forward(x) * r)` for a fixed random `r`
/// with respect to the input and every trainable parameter in `store`.
pub fn check_block<F>(store: &mut ParamStore, input: &Tensor, opts: GradCheckOptions, forward: F) -> Result<GradCheck>
where
    F: for<'t, 's> Fn(&mut Ctx<'t, 's>, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |store: &mut ParamStore, x: &Tensor, projection: Option<&Tensor>| -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, store, opts.train).with_tracking(false);
        let out = forward(&mut ctx, tape.constant(x.clone()))?.value();
        let r = match projection {
            Some(r) => r.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                Tensor::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0))
            }
        };
        let v = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok((v, r))
    };
    let (_, projection) = eval(store, input, None)?;

    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let grads = {
        let mut ctx = Ctx::new(&tape, store, opts.train).with_tracking(true);
        let out = forward(&mut ctx, x)?;
        let loss = out.mul(&tape.constant(projection.clone()))?.sum_all()?;
        tape.backward(loss)?
    };
    let input_grad = grads.get(&x).ok_or_else(|| Error::Contract("input received no gradient".into()))?;
    let mut param_grads: Vec<(usize, Vec<f64>)> = grads.params().map(|(slot, g)| (slot, g.to_vec())).collect();
    param_grads.sort_by_key(|p| p.0);

    let h = opts.step;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut record = |analytic: f64, numeric: f64| {
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.checked += 1;
    };

    for i in probes(input.len(), opts.max_per_tensor) {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(store, &plus, Some(&projection))?.0 - eval(store, &minus, Some(&projection))?.0) / (2.0 * h);
        record(input_grad.data()[i], numeric);
    }

    let trainable: Vec<_> = store.ids().filter(|&id| store.param(id).trainable).collect();
    for id in trainable {
        let analytic = param_grads.iter().find(|p| p.0 == id.0).map(|p| p.1.clone());
        let len = store.get(id).len();
        for i in probes(len, opts.max_per_tensor) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store, input, Some(&projection))?.0;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store, input, Some(&projection))?.0;
            store.get_mut(id).data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            record(a, (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
