//! Quality-aware logistic calibration of two noisy systems and their
//! linear fusion.

use freqsv::scoring::fusion::fuse;
use freqsv::scoring::{calibrate_train, eer, min_dcf, CalibrationTrial, DcfParams, QualityMeasure, ScoredTrial};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> freqsv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 4000;
    let mut labels = Vec::with_capacity(n);
    let mut durations = Vec::with_capacity(n);
    let mut systems: [Vec<ScoredTrial>; 2] = [Vec::new(), Vec::new()];
    for i in 0..n {
        let target = i % 5 == 0;
        // Short test segments give less reliable scores.
        let duration: f64 = rng.gen_range(0.5..8.0);
        let signal = if target { 1.5 * duration.ln().max(0.2) } else { 0.0 };
        for system in systems.iter_mut() {
            let score = signal + rng.sample::<f64, _>(StandardNormal);
            system.push(ScoredTrial { enroll: format!("m{i}"), test: format!("t{i}"), score });
        }
        labels.push(target);
        durations.push(duration);
    }

    let fused = fuse(&systems, &[0.5, 0.5])?;
    let report = |name: &str, scores: &[ScoredTrial]| -> freqsv::Result<()> {
        let labelled: Vec<(f64, bool)> = scores.iter().zip(&labels).map(|(s, &l)| (s.score, l)).collect();
        println!("{name:>8}: EER {:.2}%  MinDCF {:.4}", 100.0 * eer(&labelled)?, min_dcf(&labelled, DcfParams::PRIMARY)?);
        Ok(())
    };
    report("system 1", &systems[0])?;
    report("system 2", &systems[1])?;
    report("fused", &fused)?;

    let trials: Vec<CalibrationTrial> = fused
        .iter()
        .zip(&labels)
        .zip(&durations)
        .map(|((s, &target), &d)| CalibrationTrial { score: s.score, qms: vec![d.min(1.0).ln().max(-3.0)], target })
        .collect();
    let model = calibrate_train(&trials, &[QualityMeasure::Duration], 0.01)?;
    println!(
        "calibration: bias {:+.3}, score weight {:.3}, duration weight {:+.3}",
        model.bias, model.score_weight, model.qm_weights[0]
    );
    Ok(())
}
