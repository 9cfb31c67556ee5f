//! Equal error rate and minimum detection cost of Gaussian-separated scores.

use freqsv::scoring::{eer, min_dcf, DcfParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> freqsv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for separation in [0.5, 1.0, 2.0, 4.0] {
        let tar = Normal::new(separation, 1.0).expect("valid");
        let non = Normal::new(0.0, 1.0).expect("valid");
        let mut scores: Vec<(f64, bool)> = (0..2000).map(|_| (tar.sample(&mut rng), true)).collect();
        scores.extend((0..20000).map(|_| (non.sample(&mut rng), false)));
        println!(
            "separation {separation}: EER {:.2}%  MinDCF {:.4}  MinDCF2 {:.4}",
            100.0 * eer(&scores)?,
            min_dcf(&scores, DcfParams::PRIMARY)?,
            min_dcf(&scores, DcfParams::SECONDARY)?
        );
    }
    Ok(())
}
