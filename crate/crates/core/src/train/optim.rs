//! Adam with decoupled, group-dependent weight decay.

use serde::{Deserialize, Serialize};

use crate::blocks::{DecayGroup, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayGroups {
    pub aam_decay: f64,
    pub other_decay: f64,
}

impl Default for DecayGroups {
    fn default() -> Self {
        DecayGroups {
            aam_decay: 2e-4,
            other_decay: 2e-5,
        }
    }
}

impl DecayGroups {
    pub fn for_group(&self, group: DecayGroup) -> f64 {
        match group {
            DecayGroup::Head => self.aam_decay,
            DecayGroup::Body => self.other_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aam_decay < 0.0 || self.other_decay < 0.0 {
            return Err(Error::Config("weight decays must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update followed by `param -= lr * decay * param`
/// evaluated at the pre-update value.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, decay: f64, hyper: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam step over {} params, {} grads and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = params[i];
        params[i] = p - lr * m_hat / (v_hat.sqrt() + hyper.eps) - lr * decay * p;
    }
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub decay: DecayGroups,
    states: Vec<(ParamId, AdamState)>,
}

impl Adam {
    pub fn new(store: &ParamStore, decay: DecayGroups) -> Self {
        let states = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, AdamState::new(p.value.len())))
            .collect();
        Adam {
            hyper: AdamHyper::default(),
            decay,
            states,
        }
    }

    /// Applies the accumulated gradients of `store` and clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (id, state) in &mut self.states {
            let decay = self.decay.for_group(store.param(*id).group);
            let t = store.get_mut(*id);
            let grad = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            adam_step(t.data_mut(), &grad, state, lr, decay, self.hyper)?;
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![0.5, -2.0, 3.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1, 0.0, AdamHyper::default()).unwrap();
        assert_eq!(p, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, lr, 0.0, AdamHyper::default()).unwrap();
        let m = (1.0 - b1) * 1.0;
        let v = (1.0 - b2) * 1.0;
        let expect = 1.0 - lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_step() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, 1e-3, 2e-4, AdamHyper::default()).unwrap();
        assert_eq!(p[0], 1.0 - 2e-7);
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let mut s = AdamState::new(2);
        let r = adam_step(&mut [0.0, 0.0], &[1.0], &mut s, 0.1, 0.0, AdamHyper::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
