use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use crate::audio::AudioClip;
use crate::features::{mel_filterbank, FeatureConfig, MelSpectrogram, Stft};
use crate::matrix::Matrix;
use crate::vocoder::VocoderError;

const OUTPUT_PEAK: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// The input was at the log floor everywhere; `clip` is silence.
    pub silent_input: bool,
    /// `‖|STFT(x_k)| − S‖ / ‖S‖` after each iteration `k`.
    pub spectral_errors: Vec<f64>,
}

/// Linear magnitude spectrogram (frames × bins) from a log-mel one through
/// the pseudo-inverse of the filterbank, negative values clamped to zero.
pub fn mel_to_linear(mel: &MelSpectrogram) -> Result<Matrix, VocoderError> {
    let cfg = &mel.config;
    if mel.values.cols() != cfg.n_mels {
        return Err(VocoderError::ShapeMismatch(format!(
            "mel has {} bands, config says {}",
            mel.values.cols(),
            cfg.n_mels
        )));
    }
    let fb = mel_filterbank(cfg)?;
    let m = DMatrix::from_row_slice(fb.rows(), fb.cols(), fb.as_slice());
    let pinv = m
        .pseudo_inverse(1e-10)
        .map_err(|e| VocoderError::InvalidConfig(format!("filterbank pseudo-inverse: {e}")))?;
    let frames = mel.values.rows();
    let bins = fb.cols();
    let mut out = Matrix::zeros(frames, bins);
    for t in 0..frames {
        let lin: Vec<f64> = mel.values.row(t).iter().map(|v| v.exp()).collect();
        for b in 0..bins {
            let s: f64 = (0..cfg.n_mels).map(|k| pinv[(b, k)] * lin[k]).sum();
            out[(t, b)] = s.max(0.0);
        }
    }
    Ok(out)
}

fn spectral_error(spec: &[Vec<Complex<f64>>], target: &Matrix, target_norm: f64) -> f64 {
    let mut e = 0.0;
    for (t, frame) in spec.iter().enumerate() {
        for (c, s) in frame.iter().zip(target.row(t)) {
            e += (c.norm() - s).powi(2);
        }
    }
    e.sqrt() / target_norm
}

/// Griffin-Lim with the default phase seed.
pub fn griffin_lim(mel: &MelSpectrogram, n_iters: usize, cfg: &FeatureConfig) -> Result<GriffinLimOutput, VocoderError> {
    griffin_lim_with_seed(mel, n_iters, cfg, 0)
}

/// Iterative phase reconstruction on the padded signal grid, then the
/// centre padding is removed and the peak scaled to 0.95.
pub fn griffin_lim_with_seed(
    mel: &MelSpectrogram,
    n_iters: usize,
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<GriffinLimOutput, VocoderError> {
    if n_iters == 0 {
        return Err(VocoderError::InvalidConfig("n_iters must be at least 1".into()));
    }
    if mel.config != *cfg {
        return Err(VocoderError::InvalidConfig("mel was computed with a different feature config".into()));
    }
    let frames = mel.values.rows();
    if frames == 0 {
        return Err(VocoderError::ShapeMismatch("mel has no frames".into()));
    }
    let out_len = ((frames - 1) * cfg.hop).max(1);
    if mel.is_silent() {
        return Ok(GriffinLimOutput {
            clip: AudioClip::new(vec![0.0; out_len], cfg.sample_rate_hz)?,
            silent_input: true,
            spectral_errors: Vec::new(),
        });
    }
    let target = mel_to_linear(mel)?;
    let target_norm = target.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let stft = Stft::new(cfg)?;
    let padded_len = (frames - 1) * cfg.hop + cfg.fft_size;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f64>>> = (0..frames)
        .map(|t| {
            target
                .row(t)
                .iter()
                .map(|&m| Complex::from_polar(m, rng.random_range(-PI..PI)))
                .collect()
        })
        .collect();
    let mut errors = Vec::with_capacity(n_iters);
    let mut signal = Vec::new();
    for _ in 0..n_iters {
        signal = stft.synthesize(&spec, padded_len);
        let analysed = stft.analyze(&signal);
        errors.push(spectral_error(&analysed, &target, target_norm));
        spec = analysed
            .iter()
            .enumerate()
            .map(|(t, frame)| {
                frame
                    .iter()
                    .zip(target.row(t))
                    .map(|(c, &m)| {
                        let n = c.norm();
                        if n > 0.0 {
                            c * (m / n)
                        } else {
                            Complex::new(m, 0.0)
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let pad = cfg.fft_size / 2;
    let mut samples: Vec<f64> = signal[pad..pad + out_len].to_vec();
    let peak = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= OUTPUT_PEAK / peak);
    }
    Ok(GriffinLimOutput {
        clip: AudioClip::clamped(samples, cfg.sample_rate_hz)?,
        silent_input: false,
        spectral_errors: errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mel_spectrogram;

    fn small_cfg() -> FeatureConfig {
        FeatureConfig {
            fft_size: 256,
            hop: 64,
            win_length: 256,
            n_mels: 40,
            fmax_hz: 4000.0,
            sample_rate_hz: 8000,
            ..FeatureConfig::default()
        }
    }

    fn tone(freqs: &[f64], secs: f64, rate: u32) -> AudioClip {
        let n = (secs * rate as f64) as usize;
        let s = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                freqs.iter().map(|f| (2.0 * PI * f * t).sin()).sum::<f64>() * 0.5 / freqs.len() as f64
            })
            .collect();
        AudioClip::new(s, rate).unwrap()
    }

    fn cosine(a: &Matrix, b: &Matrix) -> f64 {
        let ea: Vec<f64> = a.as_slice().iter().map(|v| v.exp()).collect();
        let eb: Vec<f64> = b.as_slice().iter().map(|v| v.exp()).collect();
        let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        let na: f64 = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn tone_reconstruction_correlates() {
        let cfg = small_cfg();
        let mel = mel_spectrogram(&tone(&[1000.0], 0.5, 8000), &cfg).unwrap();
        let out = griffin_lim(&mel, 60, &cfg).unwrap();
        assert!(!out.silent_input);
        assert!((out.clip.peak() - 0.95).abs() < 1e-12);
        let back = mel_spectrogram(&out.clip, &cfg).unwrap();
        assert_eq!(back.values.shape(), mel.values.shape());
        let c = cosine(&mel.values, &back.values);
        assert!(c >= 0.9, "cosine {c}");
    }

    #[test]
    fn floor_mel_gives_silence() {
        let cfg = small_cfg();
        let mel = mel_spectrogram(&AudioClip::new(vec![0.0; 800], 8000).unwrap(), &cfg).unwrap();
        let out = griffin_lim(&mel, 5, &cfg).unwrap();
        assert!(out.silent_input);
        assert!(out.clip.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_monotone() {
        let cfg = small_cfg();
        for (i, freqs) in [[300.0, 1200.0], [500.0, 2100.0], [750.0, 900.0]].iter().enumerate() {
            let mel = mel_spectrogram(&tone(freqs, 0.25, 8000), &cfg).unwrap();
            let a = griffin_lim_with_seed(&mel, 16, &cfg, i as u64).unwrap();
            let b = griffin_lim_with_seed(&mel, 16, &cfg, i as u64).unwrap();
            assert_eq!(a, b);
            for w in a.spectral_errors.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "{:?}", a.spectral_errors);
            }
        }
    }

    #[test]
    fn rejects_mismatched_config() {
        let cfg = small_cfg();
        let mel = mel_spectrogram(&tone(&[440.0], 0.1, 8000), &cfg).unwrap();
        let other = FeatureConfig { hop: 32, ..cfg };
        assert!(griffin_lim(&mel, 3, &other).is_err());
        assert!(griffin_lim(&mel, 0, &cfg).is_err());
    }
}
