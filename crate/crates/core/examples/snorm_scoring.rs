//! Cosine scoring of an averaged enrollment model, then symmetric score
//! normalization against a cohort of impostor speakers.

use freqsv::scoring::{cosine_score, enroll_model, Cohort, SpeakerEmbedding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn near(center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> SpeakerEmbedding {
    let v = center.iter().map(|c| c + spread * rng.sample::<f64, _>(StandardNormal)).collect();
    SpeakerEmbedding::new(v).expect("finite")
}

fn main() -> freqsv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 32;
    let mut center = || (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
    let (target, impostor) = (center(), center());
    let cohort_centers: Vec<Vec<f64>> = (0..40).map(|_| center()).collect();

    let enrollment: Vec<SpeakerEmbedding> = (0..3).map(|_| near(&target, 0.5, &mut rng)).collect();
    let model = enroll_model(&enrollment)?;
    let genuine = near(&target, 0.5, &mut rng);
    let other = near(&impostor, 0.5, &mut rng);

    let speakers: Vec<Vec<SpeakerEmbedding>> =
        cohort_centers.iter().map(|c| vec![near(c, 0.5, &mut rng)]).collect();
    let cohort = Cohort::from_speakers(&speakers, 10)?;

    for (label, test) in [("target", &genuine), ("impostor", &other)] {
        let raw = cosine_score(&model, test)?;
        let normed = cohort.normalize(raw, &model, test)?;
        println!("{label:>8}: raw {raw:+.3}  s-norm {normed:+.3}");
    }
    Ok(())
}
