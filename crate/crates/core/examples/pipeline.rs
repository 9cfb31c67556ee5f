//! The whole command-line chain on a generated toy corpus in a temporary
//! directory: dataset, training, extraction, scoring, calibration, evaluation.

use clap::Parser;
use freqsv::cli::{run, Cli};

fn step(args: &[&str]) -> freqsv::Result<()> {
    let msg = run(Cli::parse_from(std::iter::once("freqsv").chain(args.iter().copied())))?;
    println!("$ freqsv {}\n{msg}", args[0]);
    Ok(())
}

fn main() -> freqsv::Result<()> {
    let dir = tempfile::tempdir()?;
    let p = |rel: &str| dir.path().join(rel).to_string_lossy().into_owned();

    step(&["toy-dataset", "--seed", "11", "--out", &p("data")])?;
    step(&["train", "--seed", "3", "--list", &p("data/train.list"), "--out", &p("model")])?;
    for split in ["train", "dev", "eval"] {
        step(&["extract", "--model", &p("model/base"), "--list", &p(&format!("data/{split}.list")), "--out", &p(&format!("emb/{split}"))])?;
    }
    for split in ["dev", "eval"] {
        step(&[
            "score",
            "--embeddings", &p(&format!("emb/{split}")),
            "--trials", &p(&format!("data/{split}.trials")),
            "--enroll", &p(&format!("data/{split}.enroll")),
            "--snorm", "50",
            "--cohort", &p("data/cohort.map"),
            "--cohort-embeddings", &p("emb/train"),
            "--quality-out", &p(&format!("emb/{split}.quality")),
            "--language-backend", &p("emb/train"),
            "--out", &p(&format!("{split}.scores")),
        ])?;
    }
    step(&["calibrate", "--scores", &p("dev.scores"), "--trials", &p("data/dev.trials"), "--quality", &p("emb/dev.quality"), "--out", &p("cal.txt")])?;
    step(&[
        "eval",
        "--scores", &p("eval.scores"),
        "--trials", &p("data/eval.trials"),
        "--calibration", &p("cal.txt"),
        "--quality", &p("emb/eval.quality"),
        "--out", &p("report.txt"),
    ])?;
    Ok(())
}
