//! Finite-difference check of the analytic gradients of a Res2Net block.

use freqsv::blocks::{check_block, Bottleneck, GradCheckOptions, Init, ParamStore, Res2DilatedBlock};
use freqsv::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> freqsv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let block = Res2DilatedBlock::new(&mut store, &mut Init { rng: &mut rng }, "res2", 8, 4, 2, Some(Bottleneck::Divisor(2)))?;
    let x = Tensor::from_fn(&[2, 8, 9], |_| rng.gen_range(-1.0..1.0));

    let report = check_block(&mut store, &x, GradCheckOptions::default(), |ctx, v| block.forward(ctx, v))?;
    println!("{} entries probed, max relative error {:.2e}", report.checked, report.max_rel_error);
    Ok(())
}
