//! Waveform to feature-matrix front end: log-mel filterbank energies,
//! per-utterance mean normalization, SpecAugment masking and random crops.

use std::path::Path;

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Reads a 16-bit PCM mono WAV file; samples are scaled to [-1, 1).
    pub fn read_wav(path: &Path) -> Result<Waveform> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Input(format!(
                "{}: expected 16-bit PCM mono, got {} channel(s) of {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM mono, clipping to the representable range.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer =
            hound::WavWriter::create(path, spec).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        for &s in &self.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}

/// Slot for waveform-level augmentation (additive noise, reverberation).
/// Corpus-backed augmentation is not bundled; [`NoAugment`] passes through.
pub trait WaveformAugment {
    fn augment(&self, w: &Waveform, rng: &mut dyn rand::RngCore) -> Waveform;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoAugment;

impl WaveformAugment for NoAugment {
    fn augment(&self, w: &Waveform, _rng: &mut dyn rand::RngCore) -> Waveform {
        w.clone()
    }
}

impl<F> WaveformAugment for F
where
    F: Fn(&Waveform, &mut dyn rand::RngCore) -> Waveform,
{
    fn augment(&self, w: &Waveform, rng: &mut dyn rand::RngCore) -> Waveform {
        self(w, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            f_min: 20.0,
            f_max: 7600.0,
        }
    }
}

/// Log-mel energies laid out as `(n_mels, frames)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Tensor,
    hop_ms: f64,
}

impl FeatureMatrix {
    pub fn new(values: Tensor, hop_ms: f64) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Dimension(format!(
                "feature matrix must be (n_mels, frames), got {:?}",
                values.shape()
            )));
        }
        if hop_ms <= 0.0 {
            return Err(Error::Parameter(format!("hop must be positive, got {hop_ms} ms")));
        }
        Ok(FeatureMatrix { values, hop_ms })
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn hop_ms(&self) -> f64 {
        self.hop_ms
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values.data()[mel * self.frames() + frame]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the HTK mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_bins: usize,
    /// Row-major `(n_mels, n_bins)` weights.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || !(0.0..nyquist).contains(&f_min) || f_max <= f_min || f_max > nyquist {
            return Err(Error::Parameter(format!(
                "invalid mel setup: {n_mels} filters over {f_min}-{f_max} Hz at {sample_rate} Hz"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                if w > 0.0 {
                    weights[m * n_bins + b] = w;
                }
            }
        }
        Ok(MelFilterbank {
            n_bins,
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.centers_hz.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_bins + bin]
    }

    /// Filterbank energies of one power spectrum of `n_bins` values.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        assert_eq!(power.len(), self.n_bins);
        self.weights
            .chunks(self.n_bins)
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Symmetric Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Window and hop lengths in samples.
pub fn frame_lengths(sample_rate: u32, win_ms: f64, hop_ms: f64) -> (usize, usize) {
    let sr = sample_rate as f64;
    (
        (win_ms * sr / 1000.0).round() as usize,
        (hop_ms * sr / 1000.0).round() as usize,
    )
}

/// Log-mel energies with the default FFT size and mel range.
pub fn logmel(w: &Waveform, n_mels: usize, win_ms: f64, hop_ms: f64) -> Result<FeatureMatrix> {
    logmel_with(
        w,
        &LogMelConfig {
            n_mels,
            win_ms,
            hop_ms,
            ..LogMelConfig::default()
        },
    )
}

pub fn logmel_with(w: &Waveform, cfg: &LogMelConfig) -> Result<FeatureMatrix> {
    let (win, hop) = frame_lengths(w.sample_rate(), cfg.win_ms, cfg.hop_ms);
    if win == 0 || hop == 0 {
        return Err(Error::Parameter("window and hop must span at least one sample".into()));
    }
    if w.samples().len() < win {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            w.samples().len()
        )));
    }
    let n_fft = cfg.n_fft.max(win.next_power_of_two());
    let bank = MelFilterbank::new(cfg.n_mels, n_fft, w.sample_rate(), cfg.f_min, cfg.f_max)?;
    let frames = 1 + (w.samples().len() - win) / hop;
    let window = hamming(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bank.n_bins()];
    let mut values = vec![0.0; cfg.n_mels * frames];
    for t in 0..frames {
        let frame = &w.samples()[t * hop..t * hop + win];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < win { frame[i] * window[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, e) in bank.apply(&power).into_iter().enumerate() {
            values[m * frames + t] = e.max(LOG_FLOOR).ln();
        }
    }
    FeatureMatrix::new(Tensor::new(&[cfg.n_mels, frames], values)?, cfg.hop_ms)
}

/// Subtracts each mel coefficient's mean over time.
pub fn mean_normalize(f: &FeatureMatrix) -> FeatureMatrix {
    let frames = f.frames();
    let mut values = f.values().clone();
    for row in values.data_mut().chunks_mut(frames) {
        let mean = row.iter().sum::<f64>() / frames as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    FeatureMatrix {
        values,
        hop_ms: f.hop_ms,
    }
}

/// Zeroes one frequency band of width uniform in `[0, max_f_mask]` and one
/// time band of width uniform in `[0, max_t_mask]`.
pub fn spec_augment<R: Rng + ?Sized>(
    f: &FeatureMatrix,
    max_f_mask: usize,
    max_t_mask: usize,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let (n_mels, frames) = (f.n_mels(), f.frames());
    if max_f_mask > n_mels || max_t_mask > frames {
        return Err(Error::Parameter(format!(
            "mask bounds ({max_f_mask}, {max_t_mask}) exceed feature extents ({n_mels}, {frames})"
        )));
    }
    let wf = rng.gen_range(0..=max_f_mask);
    let f0 = rng.gen_range(0..=n_mels - wf);
    let wt = rng.gen_range(0..=max_t_mask);
    let t0 = rng.gen_range(0..=frames - wt);
    let mut values = f.values().clone();
    let data = values.data_mut();
    for m in 0..n_mels {
        for t in 0..frames {
            if (f0..f0 + wf).contains(&m) || (t0..t0 + wt).contains(&t) {
                data[m * frames + t] = 0.0;
            }
        }
    }
    Ok(FeatureMatrix {
        values,
        hop_ms: f.hop_ms,
    })
}

/// Number of frames a crop of `crop_s` seconds spans at the given hop.
pub fn crop_frames(crop_s: f64, hop_ms: f64) -> usize {
    (crop_s * 1000.0 / hop_ms).round() as usize
}

/// Random contiguous crop of `crop_s` seconds. Inputs that are not longer
/// than the crop are read cyclically from a random offset.
pub fn random_crop<R: Rng + ?Sized>(f: &FeatureMatrix, crop_s: f64, rng: &mut R) -> Result<FeatureMatrix> {
    if !(crop_s > 0.0) {
        return Err(Error::Parameter(format!("crop duration must be positive, got {crop_s}")));
    }
    let target = crop_frames(crop_s, f.hop_ms).max(1);
    let frames = f.frames();
    let start = if frames > target {
        rng.gen_range(0..=frames - target)
    } else {
        rng.gen_range(0..frames)
    };
    Ok(crop_at(f, start, target))
}

/// Deterministic crop of `len` frames starting at `start`, wrapping around.
pub fn crop_at(f: &FeatureMatrix, start: usize, len: usize) -> FeatureMatrix {
    let frames = f.frames();
    let n_mels = f.n_mels();
    let src = f.values().data();
    let mut data = Vec::with_capacity(n_mels * len);
    for m in 0..n_mels {
        let row = &src[m * frames..(m + 1) * frames];
        data.extend((0..len).map(|i| row[(start + i) % frames]));
    }
    FeatureMatrix {
        values: Tensor::new(&[n_mels, len], data).expect("crop extents are positive"),
        hop_ms: f.hop_ms,
    }
}
