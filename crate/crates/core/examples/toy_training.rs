//! Trains one architecture on a small synthetic corpus until it reaches
//! the target training accuracy. Pass a variant name to pick one.

use freqsv::blocks::{NetworkConfig, Variant};
use freqsv::cli::toy::{make_split, ToyDatasetConfig};
use freqsv::features::{logmel, mean_normalize};
use freqsv::loss::AamConfig;
use freqsv::train::{train_loop, CyclicalLr, ModelSpec, ShuffleSampler, SpeakerModel, TrainConfig, TrainingSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> freqsv::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "ecapa_tdnn".into());
    let variant = Variant::ALL.into_iter().find(|v| v.name() == name).expect("unknown variant");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let split = make_split("train", 8, 4, &ToyDatasetConfig::default(), &mut rng)?;
    let speakers: Vec<&str> = split.voices.iter().map(|v| v.0.as_str()).collect();
    let (mut feats, mut labels, mut domains) = (vec![], vec![], vec![]);
    for utt in &split.utterances {
        feats.push(mean_normalize(&logmel(&split.render(utt)?, 40, 25.0, 10.0)?));
        labels.push(speakers.iter().position(|s| *s == utt.speaker).expect("known speaker"));
        domains.push(utt.domain.clone());
    }
    let data = TrainingSet::new(feats, labels, domains)?;

    let spec = ModelSpec {
        speakers: speakers.len(),
        aam: AamConfig { sub_centers: if variant.is_resnet() { 2 } else { 1 }, ..AamConfig::default() },
        network: NetworkConfig::toy(variant).with_n_mels(40),
    };
    let mut model = SpeakerModel::new(&spec, 1)?;
    let cfg = TrainConfig {
        batch_size: 8,
        max_iterations: 2000,
        schedule: CyclicalLr { lr_min: 1e-8, lr_max: 1e-3, cycle_len: 400 },
        crop_s: 0.5,
        spec_augment: None,
        eval_every: 25,
        target_accuracy: Some(0.95),
        ..TrainConfig::default()
    };
    let mut sampler = ShuffleSampler::new(data.samples())?;
    let mut log = std::io::stdout();
    let report = train_loop(&mut model, &data, &cfg, &mut sampler, &mut ChaCha8Rng::seed_from_u64(2), &mut log, None)?;
    println!(
        "{}: {} iterations, training accuracy {:.3}",
        variant.name(),
        report.iterations,
        report.final_accuracy().unwrap_or(0.0)
    );
    Ok(())
}
