//! 2-D convolutional stem in front of the TDNN: the output flattens
//! channels and downsampled frequency into one feature axis.

use freqsv::blocks::{ConvStem, Ctx, Init, ParamStore, StemConfig};
use freqsv::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> freqsv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cfg = StemConfig::default();
    let stem = ConvStem::new(&mut store, &mut Init { rng: &mut rng }, "stem", cfg, 80)?;

    let x = Tensor::full(&[2, 80, 50], 0.1);
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, &mut store, false);
    let y = stem.forward(&mut ctx, tape.constant(x))?;
    println!("input (2, 80, 50) -> output {:?}", y.shape());
    println!("declared output channels: {}", stem.output_channels());
    Ok(())
}
