//! STFT front end and log-mel spectrograms.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip is {clip} Hz but features expect {expected} Hz")]
    RateMismatch { clip: u32, expected: u32 },
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("mel filter {0} covers no FFT bin; lower n_mels or raise fft_size")]
    EmptyMelFilter(usize),
    #[error("feature cache {path}: {reason}")]
    BadCache { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    pub sample_rate_hz: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            win_length: 1024,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-5,
            sample_rate_hz: 22050,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        let problems = [
            (self.hop == 0, "hop must be positive"),
            (self.hop > self.win_length, "hop must not exceed win_length"),
            (self.win_length > self.fft_size, "win_length must not exceed fft_size"),
            (self.fft_size % 2 != 0, "fft_size must be even"),
            (self.n_mels == 0, "n_mels must be at least 1"),
            (!(self.fmin_hz >= 0.0), "fmin must be non-negative"),
            (!(self.fmin_hz < self.fmax_hz), "fmin must be below fmax"),
            (self.fmax_hz > nyquist, "fmax must not exceed Nyquist"),
            (!(self.log_floor > 0.0), "log_floor must be positive"),
            (self.sample_rate_hz == 0, "sample rate must be positive"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(FeatureError::InvalidConfig((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `ln(log_floor)`, the value of a silent mel cell.
    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    /// Frames produced for `len` samples after centre padding.
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + self.fft_size;
        1 + (padded - self.fft_size) / self.hop
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop as f64
    }

    /// `feature.<field>` / value pairs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("feature.fft_size".into(), self.fft_size.to_string()),
            ("feature.hop".into(), self.hop.to_string()),
            ("feature.win_length".into(), self.win_length.to_string()),
            ("feature.n_mels".into(), self.n_mels.to_string()),
            ("feature.fmin_hz".into(), format!("{:?}", self.fmin_hz)),
            ("feature.fmax_hz".into(), format!("{:?}", self.fmax_hz)),
            ("feature.log_floor".into(), format!("{:?}", self.log_floor)),
            ("feature.sample_rate_hz".into(), self.sample_rate_hz.to_string()),
        ]
    }

    /// Applies one `<field>` / `feature.<field>` override. Returns false for
    /// keys that are not feature fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, FeatureError> {
        let key = key.strip_prefix("feature.").unwrap_or(key);
        let v = value.trim();
        let bad = || FeatureError::InvalidConfig(format!("{key}: cannot parse {value:?}"));
        match key {
            "fft_size" => self.fft_size = v.parse().map_err(|_| bad())?,
            "hop" => self.hop = v.parse().map_err(|_| bad())?,
            "win_length" => self.win_length = v.parse().map_err(|_| bad())?,
            "n_mels" => self.n_mels = v.parse().map_err(|_| bad())?,
            "fmin_hz" => self.fmin_hz = v.parse().map_err(|_| bad())?,
            "fmax_hz" => self.fmax_hz = v.parse().map_err(|_| bad())?,
            "log_floor" => self.log_floor = v.parse().map_err(|_| bad())?,
            "sample_rate_hz" => self.sample_rate_hz = v.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Periodic Hann window of `win_length`, centred inside `fft_size`.
pub fn analysis_window(cfg: &FeatureConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.fft_size];
    let offset = (cfg.fft_size - cfg.win_length) / 2;
    for i in 0..cfg.win_length {
        w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win_length as f64).cos();
    }
    w
}

/// Index into `0..len` under repeated mirror reflection (edge not repeated).
fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < len as i64 { m } else { period - m }) as usize
}

pub fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    (0..x.len() + 2 * pad)
        .map(|j| x[reflect_index(j as i64 - pad as i64, x.len())])
        .collect()
}

/// Frame-wise FFT analysis and least-squares overlap-add synthesis without
/// any padding: frame `k` covers samples `k*hop .. k*hop + fft_size`.
pub struct Stft {
    cfg: FeatureConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: *cfg,
            window: analysis_window(cfg),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Number of frames covering a signal of `len` samples (len ≥ fft_size).
    pub fn frames_for(&self, len: usize) -> usize {
        1 + (len - self.cfg.fft_size) / self.cfg.hop
    }

    /// Half spectrum (`fft_size / 2 + 1` bins) of every frame.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n = self.cfg.fft_size;
        let nb = self.cfg.n_bins();
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        (0..self.frames_for(x.len()))
            .map(|k| {
                let start = k * self.cfg.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(x[start + i] * self.window[i], 0.0);
                }
                self.forward.process_with_scratch(&mut buf, &mut scratch);
                buf[..nb].to_vec()
            })
            .collect()
    }

    /// Least-squares inverse of [`Stft::analyze`] onto a signal of `len`
    /// samples. Samples no window touches are zero.
    pub fn synthesize(&self, frames: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let nb = self.cfg.n_bins();
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for (k, spec) in frames.iter().enumerate() {
            buf[..nb].copy_from_slice(&spec[..nb]);
            for j in nb..n {
                buf[j] = spec[n - j].conj();
            }
            // The imaginary parts of DC and Nyquist carry no real signal.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = k * self.cfg.hop;
            for i in 0..n {
                let t = start + i;
                if t >= len {
                    break;
                }
                let w = self.window[i];
                out[t] += w * buf[i].re / n as f64;
                norm[t] += w * w;
            }
        }
        for (o, &z) in out.iter_mut().zip(&norm) {
            *o = if z > 1e-10 { *o / z } else { 0.0 };
        }
        out
    }
}

fn check_rate(clip: &AudioClip, cfg: &FeatureConfig) -> Result<(), FeatureError> {
    if clip.sample_rate_hz() != cfg.sample_rate_hz {
        return Err(FeatureError::RateMismatch {
            clip: clip.sample_rate_hz(),
            expected: cfg.sample_rate_hz,
        });
    }
    Ok(())
}

/// Magnitude STFT with Hann window and reflection padding of `fft_size / 2`
/// on both ends. Shape: frames × (`fft_size / 2 + 1`).
pub fn stft_magnitude(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Matrix, FeatureError> {
    check_rate(clip, cfg)?;
    let stft = Stft::new(cfg)?;
    let padded = reflect_pad(clip.samples(), cfg.fft_size / 2);
    let frames = stft.analyze(&padded);
    let mut out = Matrix::zeros(frames.len(), cfg.n_bins());
    for (r, spec) in frames.iter().enumerate() {
        for (o, c) in out.row_mut(r).iter_mut().zip(spec) {
            *o = c.norm();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(cfg: &FeatureConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular mel filters with area normalisation, shape n_mels × bins.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<Matrix, FeatureError> {
    cfg.validate()?;
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let mut fb = Matrix::zeros(cfg.n_mels, cfg.n_bins());
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let scale = 2.0 / (right - left);
        for k in 0..cfg.n_bins() {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            fb[(m, k)] = rising.min(falling).max(0.0) * scale;
        }
        if fb.row(m).iter().all(|&v| v == 0.0) {
            return Err(FeatureError::EmptyMelFilter(m));
        }
    }
    Ok(fb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// frames × n_mels, natural-log magnitude.
    pub values: Matrix,
    pub config: FeatureConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    /// True when every cell sits at the log floor.
    pub fn is_silent(&self) -> bool {
        let floor = self.config.floor_value();
        self.values.as_slice().iter().all(|&v| v <= floor + 1e-12)
    }
}

/// Applies `ln(max(fb · |X|, floor))` frame by frame.
pub fn mel_from_magnitude(
    magnitude: &Matrix,
    filterbank: &Matrix,
    cfg: &FeatureConfig,
) -> MelSpectrogram {
    let mut values = magnitude.matmul(&filterbank.transpose());
    for v in values.as_mut_slice() {
        *v = v.max(cfg.log_floor).ln();
    }
    MelSpectrogram {
        values,
        config: *cfg,
    }
}

pub fn mel_spectrogram(clip: &AudioClip, cfg: &FeatureConfig) -> Result<MelSpectrogram, FeatureError> {
    let magnitude = stft_magnitude(clip, cfg)?;
    let fb = mel_filterbank(cfg)?;
    Ok(mel_from_magnitude(&magnitude, &fb, cfg))
}

const CACHE_MAGIC: &[u8; 4] = b"MELS";

/// Writes a feature cache: `MELS`, u32 frames, u32 mels, u32 reserved, then
/// little-endian f32 values row-major.
pub fn write_mel_cache(path: &Path, values: &Matrix) -> Result<(), FeatureError> {
    let io = |e| FeatureError::Io {
        path: path.to_owned(),
        source: e,
    };
    let mut buf = Vec::with_capacity(16 + 4 * values.as_slice().len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(values.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(values.cols() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &v in values.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn read_mel_cache(path: &Path) -> Result<Matrix, FeatureError> {
    let bad = |reason: &str| FeatureError::BadCache {
        path: path.to_owned(),
        reason: reason.into(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FeatureError::Io {
            path: path.to_owned(),
            source: e,
        })?;
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("missing MELS header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}
