//! Acceptance suite: one PASS/FAIL line per criterion.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use freqsv::blocks::{
    check_block, AttentiveStatsPool, Bottleneck, ConvStem, Ctx, FreqPositionalEncoding, FwSeBlock, GradCheckOptions, Init,
    Network, NetworkConfig, ParamStore, Res2DilatedBlock, SeBlock, StemConfig, Variant,
};
use freqsv::cli::commands::{cmd_train, Stage};
use freqsv::cli::toy::{write_toy_dataset, ToyDatasetConfig};
use freqsv::cli::ExperimentConfig;
use freqsv::loss::{AamConfig, AamHead};
use freqsv::scoring::{
    calibrate_train, cohort_stats_from_scores, eer, min_dcf, snorm, CalibrationTrial, CohortStats, DcfParams,
};
use freqsv::tensor::{Tape, Tensor};
use freqsv::train::{CyclicalLr, SpeakerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn fwse_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, c, f, t) = (rng.gen_range(1..3), rng.gen_range(1..9), rng.gen_range(2..17), rng.gen_range(1..12));
        let mut store = ParamStore::new();
        let block = FwSeBlock::new(&mut store, &mut Init { rng: &mut rng }, "fwse", f, Bottleneck::Divisor(2));
        for id in [block.excitation.fc1.bias, block.excitation.fc2.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|b| *b = 0.1);
        }
        let x = random_tensor(&[n, c, f, t], &mut rng);
        let tape = Tape::new();
        let out = {
            let mut ctx = Ctx::new(&tape, &mut store, false);
            (*block.forward(&mut ctx, tape.constant(x.clone())).map_err(|e| e.to_string())?.value()).clone()
        };
        let (w1, b1) = (store.get(block.excitation.fc1.weight), store.get(block.excitation.fc1.bias));
        let (w2, b2) = (store.get(block.excitation.fc2.weight), store.get(block.excitation.fc2.bias));
        let hidden_dim = b1.len();
        for ni in 0..n {
            let z: Vec<f64> = (0..f)
                .map(|fi| {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ti in 0..t {
                            acc += x.get(&[ni, ci, fi, ti]);
                        }
                    }
                    acc / (c * t) as f64
                })
                .collect();
            let hidden: Vec<f64> = (0..hidden_dim)
                .map(|j| ((0..f).map(|i| w1.get(&[j, i]) * z[i]).sum::<f64>() + b1.data()[j]).max(0.0))
                .collect();
            for fi in 0..f {
                let s = sigmoid((0..hidden_dim).map(|j| w2.get(&[fi, j]) * hidden[j]).sum::<f64>() + b2.data()[fi]);
                for ci in 0..c {
                    for ti in 0..t {
                        let expect = x.get(&[ni, ci, fi, ti]) * s;
                        worst = worst.max((out.get(&[ni, ci, fi, ti]) - expect).abs());
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-10 && elapsed < Duration::from_secs(10),
        format!("100 shapes, max abs error {worst:.2e}, {elapsed:.2?}"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let err = |e: freqsv::Error| e.to_string();

    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, &mut Init { rng: &mut rng }, "se", 6, Bottleneck::Divisor(2));
    let x = random_tensor(&[2, 6, 4, 5], &mut rng);
    results.push(("se", check_block(&mut store, &x, opts, |ctx, v| se.forward(ctx, v)).map_err(err)?.max_rel_error));

    let mut store = ParamStore::new();
    let fwse = FwSeBlock::new(&mut store, &mut Init { rng: &mut rng }, "fwse", 8, Bottleneck::Divisor(2));
    let x = random_tensor(&[2, 3, 8, 5], &mut rng);
    results.push(("fwse", check_block(&mut store, &x, opts, |ctx, v| fwse.forward(ctx, v)).map_err(err)?.max_rel_error));

    let mut store = ParamStore::new();
    let pe = FreqPositionalEncoding::new(&mut store, "pe", 8);
    let id = pe.p;
    *store.get_mut(id) = random_tensor(&[8], &mut rng);
    let x = random_tensor(&[2, 3, 8, 4], &mut rng);
    results.push((
        "posenc",
        check_block(&mut store, &x, opts, |ctx, v| Ok(pe.forward(ctx, v)?.square())).map_err(err)?.max_rel_error,
    ));

    let mut store = ParamStore::new();
    let stem_cfg = StemConfig { channels: 4, ..StemConfig::default() };
    let stem = ConvStem::new(&mut store, &mut Init { rng: &mut rng }, "stem", stem_cfg, 16).map_err(err)?;
    let x = random_tensor(&[1, 16, 8], &mut rng);
    results.push(("conv_stem", check_block(&mut store, &x, opts, |ctx, v| stem.forward(ctx, v)).map_err(err)?.max_rel_error));

    let mut store = ParamStore::new();
    let res2 = Res2DilatedBlock::new(&mut store, &mut Init { rng: &mut rng }, "res2", 8, 2, 2, Some(Bottleneck::Divisor(2)))
        .map_err(err)?;
    let x = random_tensor(&[2, 8, 6], &mut rng);
    results.push(("res2", check_block(&mut store, &x, opts, |ctx, v| res2.forward(ctx, v)).map_err(err)?.max_rel_error));

    let mut store = ParamStore::new();
    let pool = AttentiveStatsPool::new(&mut store, &mut Init { rng: &mut rng }, "pool", 4, 3);
    let x = random_tensor(&[2, 4, 7], &mut rng);
    results.push(("attentive_pool", check_block(&mut store, &x, opts, |ctx, v| pool.forward(ctx, v)).map_err(err)?.max_rel_error));

    let mut store = ParamStore::new();
    let head = AamHead::new(&mut store, &mut rng, 3, 5, AamConfig { sub_centers: 2, ..AamConfig::default() }).map_err(err)?;
    let x = random_tensor(&[3, 5], &mut rng);
    results.push((
        "aam_head",
        check_block(&mut store, &x, opts, |ctx, v| Ok(head.loss(ctx, v, &[0, 2, 1])?.0)).map_err(err)?.max_rel_error,
    ));

    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst < 1e-4 && elapsed < Duration::from_secs(300), format!("{detail}; {elapsed:.2?}"))
}

fn embed_dim(cfg: NetworkConfig, frames: usize) -> Result<usize, String> {
    let n_mels = cfg.n_mels;
    let (net, mut store) = Network::with_params(cfg, &mut ChaCha8Rng::seed_from_u64(3)).map_err(|e| e.to_string())?;
    let x = Tensor::full(&[2, n_mels, frames], 0.1);
    let y = net.embed_batch(&mut store, &x).map_err(|e| e.to_string())?;
    Ok(y.shape()[1])
}

fn shape_contract() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stem = ConvStem::new(&mut store, &mut Init { rng: &mut rng }, "stem", StemConfig::default(), 80).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let flat = {
        let mut ctx = Ctx::new(&tape, &mut store, false);
        stem.forward(&mut ctx, tape.constant(Tensor::full(&[1, 80, 3], 0.5))).map_err(|e| e.to_string())?.shape()[1]
    };
    let mut dims = Vec::new();
    let mut ok = flat == 2560;
    for v in Variant::ALL {
        for embedding_dim in [64, 48] {
            let cfg = NetworkConfig { embedding_dim, ..NetworkConfig::toy(v).with_n_mels(40) };
            let d = embed_dim(cfg, 20)?;
            ok &= d == embedding_dim;
            dims.push(format!("{} {d}", v.name()));
        }
    }
    check(ok, format!("stem {flat} channels; {}", dims.join(", ")))
}

fn toy_data(dir: &Path) -> Result<(), String> {
    write_toy_dataset(dir, &ToyDatasetConfig::default(), 7, true).map(|_| ()).map_err(|e| e.to_string())
}

fn positional_encoding(trained: &Path) -> Outcome {
    let mut with = NetworkConfig::toy(Variant::FwseResnetPosenc).with_n_mels(40);
    with.pos_enc = true;
    let without = NetworkConfig { pos_enc: false, ..with.clone() };
    let x = Tensor::from_fn(&[2, 40, 30], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
    let run = |cfg: NetworkConfig| -> Result<Tensor, String> {
        let (net, mut store) = Network::with_params(cfg, &mut ChaCha8Rng::seed_from_u64(4)).map_err(|e| e.to_string())?;
        net.embed_batch(&mut store, &x).map_err(|e| e.to_string())
    };
    let identical = run(with)?.data() == run(without)?.data();
    let model = SpeakerModel::load(trained).map_err(|e| e.to_string())?;
    let norms: Vec<f64> = model.net.positional_encodings().iter().map(|&id| model.store.get(id).norm()).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    check(
        identical && max > 1e-3,
        format!("zero encoding bit-identical: {identical}; trained max |p| {max:.4} over {} blocks", norms.len()),
    )
}

fn toy_training(data: &Path, work: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for v in Variant::ALL {
        let cfg = ExperimentConfig::toy(v);
        let mut logs = Vec::new();
        let mut elapsed = Duration::ZERO;
        let mut report = None;
        for run in 0..2 {
            let out = work.join(format!("{}-{run}", v.name()));
            let start = Instant::now();
            let r = cmd_train(&cfg, &data.join("train.list"), &out, Stage::Base).map_err(|e| e.to_string())?;
            elapsed = elapsed.max(start.elapsed());
            logs.push(fs::read(out.join("base.log")).map_err(|e| e.to_string())?);
            report = Some(r);
        }
        let report = report.expect("two runs");
        let acc = report.final_accuracy().unwrap_or(0.0);
        let deterministic = logs[0] == logs[1];
        let pass = acc > 0.95 && report.iterations <= 2000 && deterministic && elapsed < Duration::from_secs(900);
        ok &= pass;
        lines.push(format!(
            "{} acc {acc:.3} at {} it, deterministic {deterministic}, {elapsed:.1?}",
            v.name(),
            report.iterations
        ));
    }
    check(ok, lines.join("; "))
}

fn schedule() -> Outcome {
    let s = CyclicalLr::default();
    let half = s.half_cycle();
    let second_peak = s.lr_at(3 * half);
    let expect_second = s.lr_min + (s.lr_max - s.lr_min) / 2.0;
    let ok = s.lr_at(0) == 1e-8 && s.lr_at(half) == 1e-3 && second_peak == expect_second;
    check(
        ok,
        format!("t=0 {:e}, first peak {:e}, second peak {second_peak:e}", s.lr_at(0), s.lr_at(half)),
    )
}

/// Counting oracle: at threshold `tau` a trial is accepted when `score >= tau`.
fn rates_at(scores: &[(f64, bool)], tau: f64) -> (f64, f64) {
    let n_tar = scores.iter().filter(|s| s.1).count() as f64;
    let n_non = scores.len() as f64 - n_tar;
    let miss = scores.iter().filter(|s| s.1 && s.0 < tau).count() as f64;
    let fa = scores.iter().filter(|s| !s.1 && s.0 >= tau).count() as f64;
    (miss / n_tar, fa / n_non)
}

fn thresholds(scores: &[(f64, bool)]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.iter().map(|s| s.0).collect();
    t.push(f64::INFINITY);
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn eer_oracle(scores: &[(f64, bool)]) -> f64 {
    let points: Vec<(f64, f64)> = thresholds(scores).iter().map(|&t| rates_at(scores, t)).collect();
    for i in 0..points.len() - 1 {
        let (m0, f0) = points[i];
        let (m1, f1) = points[i + 1];
        if m0 >= f0 && m1 <= f1 {
            let (d0, d1) = (m0 - f0, m1 - f1);
            if d0 == d1 {
                return m0;
            }
            return m0 + d0 / (d0 - d1) * (m1 - m0);
        }
    }
    f64::NAN
}

fn min_dcf_oracle(scores: &[(f64, bool)], p: DcfParams) -> f64 {
    let best = thresholds(scores)
        .iter()
        .map(|&t| {
            let (miss, fa) = rates_at(scores, t);
            p.c_miss * p.p_target * miss + p.c_fa * (1.0 - p.p_target) * fa
        })
        .fold(f64::INFINITY, f64::min);
    best / (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut eer_err, mut dcf_mismatch) = (0.0f64, 0usize);
    for i in 0..1000 {
        let (n_tar, n_non) = (rng.gen_range(1..40), rng.gen_range(1..80));
        let shift = rng.gen_range(0.0..2.0);
        let coarse = i % 3 == 0;
        let mut draw = |offset: f64| {
            let v: f64 = rng.gen_range(-1.0..1.0) + offset;
            if coarse {
                (v * 5.0).round() / 5.0
            } else {
                v
            }
        };
        let mut scores: Vec<(f64, bool)> = (0..n_tar).map(|_| (draw(shift), true)).collect();
        scores.extend((0..n_non).map(|_| (draw(0.0), false)));
        let e = eer(&scores).map_err(|e| e.to_string())?;
        eer_err = eer_err.max((e - eer_oracle(&scores)).abs());
        for p in [DcfParams::PRIMARY, DcfParams::SECONDARY] {
            if min_dcf(&scores, p).map_err(|e| e.to_string())? != min_dcf_oracle(&scores, p) {
                dcf_mismatch += 1;
            }
        }
    }
    check(
        eer_err <= 1e-12 && dcf_mismatch == 0,
        format!("1000 sets, max eer deviation {eer_err:.1e}, min_dcf mismatches {dcf_mismatch}"),
    )
}

fn snorm_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let unit = CohortStats { mean: 0.0, std: 1.0 };
    let (mut shift_err, mut identity_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.gen_range(2..60);
        let e: Vec<f64> = (0..rng.gen_range(2..100)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..rng.gen_range(2..100)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = rng.gen_range(-1.0..1.0);
        let c = rng.gen_range(-1.0..1.0);
        let stats = |v: &[f64]| cohort_stats_from_scores(v, k).map_err(|e| e.to_string());
        let base = snorm(raw, &stats(&e)?, &stats(&t)?).map_err(|e| e.to_string())?;
        let shifted = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let moved = snorm(raw + c, &stats(&shifted(&e))?, &stats(&shifted(&t))?).map_err(|e| e.to_string())?;
        shift_err = shift_err.max((base - moved).abs());
        identity_err = identity_err.max((snorm(raw, &unit, &unit).map_err(|e| e.to_string())? - raw).abs());
    }
    check(
        shift_err <= 1e-12 && identity_err <= 1e-12,
        format!("1000 cohorts, shift deviation {shift_err:.1e}, identity deviation {identity_err:.1e}"),
    )
}

fn calibration_recovery() -> Outcome {
    let (mut ws_err, mut w0_err) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mean: f64 = 2.0;
        let tar = Normal::new(mean, (2.0 * mean).sqrt()).expect("valid");
        let non = Normal::new(-mean, (2.0 * mean).sqrt()).expect("valid");
        let mut trials = Vec::new();
        for _ in 0..20_000 {
            trials.push(CalibrationTrial { score: tar.sample(&mut rng), qms: vec![], target: true });
            trials.push(CalibrationTrial { score: non.sample(&mut rng), qms: vec![], target: false });
        }
        let m = calibrate_train(&trials, &[], 0.01).map_err(|e| e.to_string())?;
        ws_err = ws_err.max((m.score_weight - 1.0).abs());
        w0_err = w0_err.max(m.bias.abs());
    }
    check(
        ws_err <= 0.05 && w0_err <= 0.05,
        format!("10 seeds, max |w_s - 1| {ws_err:.4}, max |w_0| {w0_err:.4}"),
    )
}

fn freqsv(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_freqsv")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("freqsv {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

/// The full command-line chain with and without quality measures.
fn pipeline(root: &Path) -> Result<(), String> {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    freqsv(&["toy-dataset", "--seed", "11", "--out", &p("data")])?;
    freqsv(&["train", "--seed", "3", "--list", &p("data/train.list"), "--out", &p("model")])?;
    for split in ["train", "dev", "eval"] {
        freqsv(&["extract", "--model", &p("model/base"), "--list", &p(&format!("data/{split}.list")), "--out", &p(&format!("emb/{split}"))])?;
    }
    for split in ["dev", "eval"] {
        freqsv(&[
            "score",
            "--embeddings", &p(&format!("emb/{split}")),
            "--trials", &p(&format!("data/{split}.trials")),
            "--enroll", &p(&format!("data/{split}.enroll")),
            "--snorm", "50",
            "--cohort", &p("data/cohort.map"),
            "--cohort-embeddings", &p("emb/train"),
            "--quality-out", &p(&format!("emb/{split}.quality")),
            "--language-backend", &p("emb/train"),
            "--out", &p(&format!("scores/{split}.scores")),
        ])?;
    }
    for (name, measures) in [("plain", "none"), ("qm", "duration,enroll_count,language_llr")] {
        freqsv(&[
            "calibrate",
            "--scores", &p("scores/dev.scores"),
            "--trials", &p("data/dev.trials"),
            "--quality", &p("emb/dev.quality"),
            "--measures", measures,
            "--out", &p(&format!("cal-{name}.txt")),
        ])?;
        freqsv(&[
            "eval",
            "--scores", &p("scores/eval.scores"),
            "--trials", &p("data/eval.trials"),
            "--calibration", &p(&format!("cal-{name}.txt")),
            "--quality", &p("emb/eval.quality"),
            "--out", &p(&format!("report-{name}.txt")),
        ])?;
    }
    Ok(())
}

fn report_value(path: &Path, key: &str) -> Result<f64, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .find(|l| l.starts_with(key))
        .and_then(|l| l.split_whitespace().last())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("{key} missing from {}", path.display()))
}

fn qm_delta(run: &Path) -> Outcome {
    let key = "MinDCF(";
    let plain = report_value(&run.join("report-plain.txt"), key)?;
    let qm = report_value(&run.join("report-qm.txt"), key)?;
    let (ep, eq) = (report_value(&run.join("report-plain.txt"), "EER")?, report_value(&run.join("report-qm.txt"), "EER")?);
    check(
        qm <= plain + 1e-6,
        format!("MinDCF {plain:.4} -> {qm:.4} with QMs (EER {ep:.2}% -> {eq:.2}%)"),
    )
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let files = [
        "scores/dev.scores",
        "scores/eval.scores",
        "cal-plain.txt",
        "cal-qm.txt",
        "report-plain.txt",
        "report-qm.txt",
    ];
    let mut differing = Vec::new();
    for f in files {
        if fs::read(a.join(f)).map_err(|e| e.to_string())? != fs::read(b.join(f)).map_err(|e| e.to_string())? {
            differing.push(f);
        }
    }
    check(differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", files.len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let data = work.path().join("data");
    let runs = [work.path().join("run-a"), work.path().join("run-b")];
    let pipeline_status: Result<(), String> = runs.iter().try_for_each(|r| pipeline(r));

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("fwSE scalar oracle", Box::new(fwse_oracle)),
        ("finite-difference gradients", Box::new(gradient_suite)),
        ("shape contract", Box::new(shape_contract)),
        ("positional encoding", Box::new(|| {
            toy_data(&data)?;
            let out = work.path().join("posenc");
            cmd_train(&ExperimentConfig::toy(Variant::FwseResnetPosenc), &data.join("train.list"), &out, Stage::Base)
                .map_err(|e| e.to_string())?;
            positional_encoding(&out.join("base"))
        })),
        ("toy training", Box::new(|| {
            toy_data(&data)?;
            toy_training(&data, &work.path().join("training"))
        })),
        ("cyclical schedule", Box::new(schedule)),
        ("metric oracles", Box::new(metrics_oracle)),
        ("s-norm properties", Box::new(snorm_properties)),
        ("calibration recovery", Box::new(calibration_recovery)),
        ("quality measures on toy eval", Box::new(|| {
            pipeline_status.clone()?;
            qm_delta(&runs[0])
        })),
        ("end-to-end determinism", Box::new(|| {
            pipeline_status.clone()?;
            determinism(&runs[0], &runs[1])
        })),
    ];

    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
