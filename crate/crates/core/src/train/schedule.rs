//! Triangular cyclical learning rate with per-cycle amplitude halving.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CyclicalLr {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Full period (rise and fall) in iterations.
    pub cycle_len: usize,
}

impl Default for CyclicalLr {
    fn default() -> Self {
        CyclicalLr {
            lr_min: 1e-8,
            lr_max: 1e-3,
            cycle_len: 130_000,
        }
    }
}

impl CyclicalLr {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_len < 2 || !self.cycle_len.is_multiple_of(2) {
            return Err(Error::Config(format!("cycle length {} must be even and at least 2", self.cycle_len)));
        }
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= min <= max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }

    pub fn half_cycle(&self) -> usize {
        self.cycle_len / 2
    }

    /// Learning rate at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let step = self.half_cycle() as f64;
        let t = t as f64;
        let cycle = (1.0 + t / (2.0 * step)).floor();
        let x = (t / step - 2.0 * cycle + 1.0).abs();
        let amplitude = (self.lr_max - self.lr_min) / 2f64.powf(cycle - 1.0);
        self.lr_min + amplitude * (1.0 - x).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchors() {
        let s = CyclicalLr::default();
        assert_eq!(s.lr_at(0), 1e-8);
        assert_eq!(s.lr_at(65_000), 1e-3);
        assert_eq!(s.lr_at(130_000), 1e-8);
        let second = s.lr_at(3 * 65_000);
        assert_eq!(second, 1e-8 + (1e-3 - 1e-8) / 2.0);
        assert!((second - 5.0e-4).abs() < 1e-8);
    }

    #[test]
    fn odd_cycles_are_rejected() {
        assert!(CyclicalLr { cycle_len: 7, ..Default::default() }.validate().is_err());
        assert!(CyclicalLr { lr_min: 1.0, lr_max: 0.5, cycle_len: 10 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_piecewise_linear(half in 1usize..200, t in 0usize..5000) {
            let s = CyclicalLr { lr_min: 1e-8, lr_max: 1e-3, cycle_len: 2 * half };
            let lr = s.lr_at(t);
            prop_assert!(lr >= s.lr_min && lr <= s.lr_max);
            // Linear within each half-cycle segment, continuous across segment ends.
            let seg_start = t - t % half;
            let (a, b) = (s.lr_at(seg_start), s.lr_at(seg_start + half));
            let interp = a + (b - a) * (t - seg_start) as f64 / half as f64;
            prop_assert!((lr - interp).abs() < 1e-15);
        }
    }
}
