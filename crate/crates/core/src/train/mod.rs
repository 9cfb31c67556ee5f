//! Optimization: learning-rate schedule, Adam with decay groups, batch
//! samplers and the training loop.

pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use optim::{adam_step, Adam, AdamHyper, AdamState, DecayGroups};
pub use sampler::{BatchSampler, Domain, DomainBalancedSampler, Sample, ShuffleSampler};
pub use schedule::CyclicalLr;
pub use trainer::{
    train_loop, training_accuracy, FineTuneConfig, ModelSpec, SpecAugmentConfig, SpeakerModel, TrainConfig, TrainReport,
    TrainingSet, NETWORK_FILE, WEIGHTS_STEM,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{NetworkConfig, Variant};
    use crate::features::FeatureMatrix;
    use crate::loss::AamConfig;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Speaker-specific sinusoidal spectral envelopes plus noise.
    fn toy_set(speakers: usize, per_speaker: usize, n_mels: usize, frames: usize) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for s in 0..speakers {
            for _ in 0..per_speaker {
                let t = Tensor::from_fn(&[n_mels, frames], |i| {
                    let m = (i / frames) as f64;
                    (m * (s + 1) as f64 * 0.35).sin() + rng.gen_range(-0.3..0.3)
                });
                features.push(FeatureMatrix::new(t, 10.0).unwrap());
                labels.push(s);
            }
        }
        let domains = labels.iter().map(|&l| if l % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        TrainingSet::new(features, labels, domains).unwrap()
    }

    fn spec(speakers: usize) -> ModelSpec {
        let mut network = NetworkConfig::toy(Variant::EcapaTdnn).with_n_mels(16);
        network.ecapa_channels = 16;
        network.mfa_channels = 48;
        network.embedding_dim = 16;
        network.attention_dim = 8;
        ModelSpec {
            speakers,
            aam: AamConfig::default(),
            network,
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_iterations: 12,
            schedule: CyclicalLr {
                lr_min: 1e-8,
                lr_max: 1e-3,
                cycle_len: 8,
            },
            crop_s: 0.2,
            eval_every: 6,
            ..TrainConfig::default()
        }
    }

    fn run(seed: u64) -> (TrainReport, String) {
        let data = toy_set(3, 2, 16, 30);
        let mut model = SpeakerModel::new(&spec(3), seed).unwrap();
        let mut sampler = ShuffleSampler::new(data.samples()).unwrap();
        let mut log = Vec::new();
        let mut cfg = config();
        cfg.spec_augment = Some(SpecAugmentConfig {
            max_freq_mask: 2,
            max_time_mask: 3,
        });
        let report = train_loop(&mut model, &data, &cfg, &mut sampler, &mut ChaCha8Rng::seed_from_u64(seed), &mut log, None).unwrap();
        (report, String::from_utf8(log).unwrap())
    }

    #[test]
    fn logged_learning_rates_follow_the_schedule() {
        let (report, log) = run(1);
        let s = config().schedule;
        assert_eq!(report.iterations, 12);
        for (t, lr) in report.lrs.iter().enumerate() {
            assert_eq!(*lr, s.lr_at(t));
        }
        assert_eq!(log.lines().count(), 12);
        let fields: Vec<&str> = log.lines().nth(4).unwrap().split(' ').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], "4");
        assert_eq!(fields[2].parse::<f64>().unwrap(), s.lr_at(4));
        assert_eq!(report.evaluations.len(), 2);
    }

    #[test]
    fn same_seed_same_curve() {
        let (a, la) = run(5);
        let (b, lb) = run(5);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = run(6);
        assert_ne!(a.losses, c.losses);
    }

    #[test]
    fn diverging_loss_aborts() {
        let data = toy_set(2, 2, 16, 30);
        let mut model = SpeakerModel::new(&spec(2), 0).unwrap();
        let id = model.head.prototypes;
        model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let mut sampler = ShuffleSampler::new(data.samples()).unwrap();
        let r = train_loop(&mut model, &data, &config(), &mut sampler, &mut ChaCha8Rng::seed_from_u64(0), &mut Vec::new(), None);
        assert!(matches!(r, Err(crate::Error::Training(_))), "{r:?}");
    }

    #[test]
    fn checkpoints_round_trip_and_land_every_half_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_set(2, 2, 16, 30);
        let mut model = SpeakerModel::new(&spec(2), 3).unwrap();
        let mut sampler = DomainBalancedSampler::new(data.balanced_domains("a"), 1).unwrap();
        let cfg = config();
        train_loop(&mut model, &data, &cfg, &mut sampler, &mut ChaCha8Rng::seed_from_u64(0), &mut Vec::new(), Some(dir.path())).unwrap();
        for it in [4, 8, 12] {
            assert!(dir.path().join(format!("ckpt-{it}")).join(NETWORK_FILE).exists());
        }
        model.save(&dir.path().join("final")).unwrap();
        let loaded = SpeakerModel::load(&dir.path().join("final")).unwrap();
        for ((_, a), (_, b)) in loaded.store.iter().zip(model.store.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert!(matches!(SpeakerModel::load(&dir.path().join("missing")), Err(crate::Error::Config(_))));
    }

    #[test]
    fn fine_tune_overrides_margin_and_crop() {
        let mut model = SpeakerModel::new(&spec(2), 0).unwrap();
        let mut cfg = config();
        FineTuneConfig::default().apply(&mut cfg, &mut model).unwrap();
        assert_eq!(cfg.crop_s, 3.0);
        assert_eq!(model.head.cfg.margin, 0.3);
        let bad = FineTuneConfig { crop_s: 3.0, margin: 2.0 };
        assert!(bad.apply(&mut cfg, &mut model).is_err());
    }
}
