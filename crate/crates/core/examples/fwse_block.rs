//! Frequency-wise squeeze-excitation: every mel band of a (N, C, F, T)
//! map is rescaled by its own gate.

use freqsv::blocks::{Bottleneck, Ctx, FwSeBlock, Init, ParamStore};
use freqsv::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> freqsv::Result<()> {
    let (channels, freq, frames) = (4, 10, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let block = FwSeBlock::new(&mut store, &mut Init { rng: &mut rng }, "fwse", freq, Bottleneck::Divisor(2));

    let x = Tensor::from_fn(&[1, channels, freq, frames], |i| 1.0 + (i % 7) as f64 / 10.0);
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, &mut store, false);
    let y = block.forward(&mut ctx, tape.constant(x.clone()))?;
    let y = y.value();

    println!("band  gate");
    for f in 0..freq {
        // The gate is shared across channels and frames, so any cell gives it.
        let gate = y.get(&[0, 0, f, 0]) / x.get(&[0, 0, f, 0]);
        println!("{f:>4}  {gate:.4}");
    }
    Ok(())
}
