//! Learnable frequency positional encoding added along the mel axis.

use freqsv::blocks::{Ctx, FreqPositionalEncoding, ParamStore};
use freqsv::tensor::{Tape, Tensor};

fn main() -> freqsv::Result<()> {
    let freq = 6;
    let mut store = ParamStore::new();
    let enc = FreqPositionalEncoding::new(&mut store, "pe", freq);
    let x = Tensor::from_fn(&[1, 2, freq, 3], |i| i as f64);

    let run = |store: &mut ParamStore| -> freqsv::Result<Tensor> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, store, false);
        Ok((*enc.forward(&mut ctx, tape.constant(x.clone()))?.value()).clone())
    };

    let untouched = run(&mut store)?;
    println!("zero-initialized encoding leaves input unchanged: {}", untouched.data() == x.data());

    *store.get_mut(enc.p) = Tensor::from_fn(&[freq], |f| 0.1 * f as f64);
    let shifted = run(&mut store)?;
    for f in 0..freq {
        println!("band {f}: {:.1} -> {:.1}", x.get(&[0, 0, f, 0]), shifted.get(&[0, 0, f, 0]));
    }
    Ok(())
}
