//! Plain-text trial, score, map and quality files, and the embedding
//! archive (text index into a binary tensor stream plus a metadata sidecar).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad_line(path: &Path, n: usize, line: &str) -> Error {
    Error::Format(format!("{}:{}: malformed line `{line}`", path.display(), n + 1))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| (n, l.to_string()))
        .collect())
}

fn number(path: &Path, n: usize, line: &str, field: &str) -> Result<f64> {
    field.parse().map_err(|_| bad_line(path, n, line))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Target,
    Nontarget,
    Unknown,
}

impl Label {
    pub fn from_bool(target: bool) -> Self {
        if target {
            Label::Target
        } else {
            Label::Nontarget
        }
    }

    pub fn is_target(self) -> Option<bool> {
        match self {
            Label::Target => Some(true),
            Label::Nontarget => Some(false),
            Label::Unknown => None,
        }
    }
}

/// One line of a trial list: `enroll_id test_id [target|nontarget]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialKey {
    pub enroll: String,
    pub test: String,
    pub label: Label,
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialKey>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let label = match f.get(2) {
                None => Label::Unknown,
                Some(&"target") => Label::Target,
                Some(&"nontarget") => Label::Nontarget,
                Some(_) => return Err(bad_line(path, n, &line)),
            };
            if f.len() < 2 || f.len() > 3 {
                return Err(bad_line(path, n, &line));
            }
            Ok(TrialKey { enroll: f[0].into(), test: f[1].into(), label })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[TrialKey]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        match t.label {
            Label::Target => writeln!(s, "{} {} target", t.enroll, t.test),
            Label::Nontarget => writeln!(s, "{} {} nontarget", t.enroll, t.test),
            Label::Unknown => writeln!(s, "{} {}", t.enroll, t.test),
        }
        .expect("writing to a String cannot fail");
    }
    fs::write(path, s)?;
    Ok(())
}

/// One line of a score file: `enroll_id test_id score`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

pub fn format_scores(scores: &[ScoredTrial]) -> String {
    let mut s = String::new();
    for t in scores {
        writeln!(s, "{} {} {}", t.enroll, t.test, t.score).expect("writing to a String cannot fail");
    }
    s
}

pub fn write_scores(path: &Path, scores: &[ScoredTrial]) -> Result<()> {
    fs::write(path, format_scores(scores))?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredTrial>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            [e, t, s] => Ok(ScoredTrial { enroll: e.to_string(), test: t.to_string(), score: number(path, n, &line, s)? }),
            _ => Err(bad_line(path, n, &line)),
        })
        .collect()
}

/// `key member member ...` lines, used for enrollment models and cohorts.
pub fn read_id_map(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let mut f = line.split_whitespace().map(String::from);
            let key = f.next().ok_or_else(|| bad_line(path, n, &line))?;
            let members: Vec<String> = f.collect();
            if members.is_empty() {
                return Err(bad_line(path, n, &line));
            }
            Ok((key, members))
        })
        .collect()
}

pub fn write_id_map(path: &Path, map: &[(String, Vec<String>)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in map {
        writeln!(s, "{k} {}", v.join(" ")).expect("writing to a String cannot fail");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Side information of an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceMeta {
    pub id: String,
    pub duration_s: f64,
    pub language: String,
    pub gender: String,
    pub domain: String,
}

/// One entry of an utterance list: `id wav speaker language gender domain`.
/// Relative wav paths resolve against the list's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ListEntry {
    pub id: String,
    pub wav: PathBuf,
    pub speaker: String,
    pub language: String,
    pub gender: String,
    pub domain: String,
}

pub fn read_list(path: &Path) -> Result<Vec<ListEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            [id, wav, speaker, language, gender, domain] => Ok(ListEntry {
                id: id.to_string(),
                wav: base.join(wav),
                speaker: speaker.to_string(),
                language: language.to_string(),
                gender: gender.to_string(),
                domain: domain.to_string(),
            }),
            _ => Err(bad_line(path, n, &line)),
        })
        .collect()
}

/// Writes a list with wav paths stored as given.
pub fn write_list(path: &Path, entries: &[ListEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        writeln!(
            s,
            "{} {} {} {} {} {}",
            e.id,
            e.wav.display(),
            e.speaker,
            e.language,
            e.gender,
            e.domain
        )
        .expect("writing to a String cannot fail");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Embedding archive held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Tensor)>,
    pub meta: Vec<UtteranceMeta>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Archive {
    pub fn index_path(stem: &Path) -> PathBuf {
        with_suffix(stem, ".index")
    }

    pub fn data_path(stem: &Path) -> PathBuf {
        with_suffix(stem, ".bin")
    }

    pub fn meta_path(stem: &Path) -> PathBuf {
        with_suffix(stem, ".meta")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut data = BufWriter::new(fs::File::create(Self::data_path(stem))?);
        let mut index = String::new();
        let mut offset = 0usize;
        for (id, t) in &self.entries {
            let bytes = t.to_bytes();
            data.write_all(&bytes)?;
            writeln!(index, "{id} {offset}").expect("writing to a String cannot fail");
            offset += bytes.len();
        }
        data.flush()?;
        fs::write(Self::index_path(stem), index)?;
        let mut meta = String::new();
        for m in &self.meta {
            writeln!(meta, "{} {} {} {} {}", m.id, m.duration_s, m.language, m.gender, m.domain)
                .expect("writing to a String cannot fail");
        }
        fs::write(Self::meta_path(stem), meta)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let index_path = Self::index_path(stem);
        let mut data = BufReader::new(
            fs::File::open(Self::data_path(stem))
                .map_err(|e| Error::Input(format!("cannot open archive {}: {e}", stem.display())))?,
        );
        let mut entries = Vec::new();
        for (n, line) in read_lines(&index_path)? {
            let [id, offset] = line.split_whitespace().collect::<Vec<_>>()[..] else {
                return Err(bad_line(&index_path, n, &line));
            };
            let offset: u64 = offset.parse().map_err(|_| bad_line(&index_path, n, &line))?;
            data.seek(SeekFrom::Start(offset))?;
            entries.push((id.to_string(), Tensor::read_from(&mut data)?));
        }
        let meta_path = Self::meta_path(stem);
        let meta = if meta_path.exists() {
            read_lines(&meta_path)?
                .into_iter()
                .map(|(n, line)| match line.split_whitespace().collect::<Vec<_>>().as_slice() {
                    [id, d, language, gender, domain] => Ok(UtteranceMeta {
                        id: id.to_string(),
                        duration_s: number(&meta_path, n, &line, d)?,
                        language: language.to_string(),
                        gender: gender.to_string(),
                        domain: domain.to_string(),
                    }),
                    _ => Err(bad_line(&meta_path, n, &line)),
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Archive { entries, meta })
    }

    pub fn lookup(&self) -> BTreeMap<&str, &Tensor> {
        self.entries.iter().map(|(id, t)| (id.as_str(), t)).collect()
    }

    pub fn meta_lookup(&self) -> BTreeMap<&str, &UtteranceMeta> {
        self.meta.iter().map(|m| (m.id.as_str(), m)).collect()
    }
}

/// One line of a quality file: `enroll_id test_id n_e d_t lang_llr`, with
/// `-` for a language llr that was not computed.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityRow {
    pub enroll: String,
    pub test: String,
    pub n_e: usize,
    pub d_t: f64,
    pub lang_llr: Option<f64>,
}

pub fn write_quality(path: &Path, rows: &[QualityRow]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        let llr = r.lang_llr.map_or_else(|| "-".to_string(), |v| v.to_string());
        writeln!(s, "{} {} {} {} {llr}", r.enroll, r.test, r.n_e, r.d_t).expect("writing to a String cannot fail");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_quality(path: &Path) -> Result<Vec<QualityRow>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            [e, t, n_e, d_t, llr] => Ok(QualityRow {
                enroll: e.to_string(),
                test: t.to_string(),
                n_e: n_e.parse().map_err(|_| bad_line(path, n, &line))?,
                d_t: number(path, n, &line, d_t)?,
                lang_llr: if *llr == "-" { None } else { Some(number(path, n, &line, llr)?) },
            }),
            _ => Err(bad_line(path, n, &line)),
        })
        .collect()
}
