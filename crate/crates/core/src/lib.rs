//! Frequency-aware speaker verification at desk scale.
//!
//! The crate covers the whole chain from waveforms to calibrated decisions:
//!
//! * [`tensor`]: a dense `f64` tensor engine with reverse-mode autodiff.
//! * [`features`]: log-mel filterbanks, mean normalization, SpecAugment and crops.
//! * [`blocks`]: SE and frequency-wise SE blocks, frequency positional
//!   encodings, the 2D convolutional stem, Res2 blocks, attentive statistics
//!   pooling and the four network variants built from them.
//! * [`loss`]: (sub-center) additive angular margin heads and cross-entropy.
//! * [`train`]: triangular2 cyclical learning rates, Adam with decoupled decay
//!   groups, the domain-balanced sampler and the training loop.
//! * [`scoring`]: enrollment, cosine scoring, adaptive s-norm, quality
//!   measures, a Gaussian language backend, calibration, fusion and metrics.
//! * [`cli`]: the batch commands behind the `freqsv` binary.
//!
//! Runnable walkthroughs of each capability live in `examples/`.

pub mod error;
pub mod blocks;
pub mod cli;
pub mod features;
pub mod loss;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
