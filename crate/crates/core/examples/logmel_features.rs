//! Log-mel front end on a synthetic utterance, with mean normalization,
//! SpecAugment-style masking and a random crop.

use freqsv::cli::toy::{synthesize, Voice};
use freqsv::features::{logmel, mean_normalize, random_crop};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> freqsv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let voice = Voice::random('f', &mut rng);
    let wave = synthesize(&voice, "fa", 2.0, 11)?;
    println!("{} samples at {} Hz ({:.2} s)", wave.samples().len(), wave.sample_rate(), wave.duration_s());

    let feats = logmel(&wave, 80, 25.0, 10.0)?;
    println!("log-mel matrix: {} mels x {} frames", feats.n_mels(), feats.frames());

    let normalized = mean_normalize(&feats);
    let row_mean = (0..normalized.frames()).map(|t| normalized.get(10, t)).sum::<f64>() / normalized.frames() as f64;
    println!("mel 10 mean after normalization: {row_mean:.2e}");

    let crop = random_crop(&normalized, 0.5, &mut rng)?;
    println!("0.5 s crop: {} frames", crop.frames());
    Ok(())
}
