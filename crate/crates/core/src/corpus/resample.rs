//! Polyphase windowed-sinc sample-rate conversion.
//!
//! Every output sample is a 48-tap dot product against the input, with the
//! tap set chosen by the fractional input position of that output sample.
//! Taps are a Kaiser-windowed sinc (beta 8.6) cut off at 0.45 x the lower of
//! the two rates, and each phase is normalised to unity DC gain.

use crate::audio::{AudioClip, AudioError};

pub const TAPS_PER_PHASE: usize = 48;
pub const KAISER_BETA: f64 = 8.6;
pub const CUTOFF_FRACTION: f64 = 0.45;

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(t: f64, half_width: f64, beta: f64) -> f64 {
    let r = t / half_width;
    if r.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - r * r).sqrt()) / bessel_i0(beta)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Precomputed filter bank for one rate pair.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: u64,
    down: u64,
    phases: Vec<[f64; TAPS_PER_PHASE]>,
}

impl Resampler {
    pub fn new(source_rate_hz: u32, target_rate_hz: u32) -> Result<Self, AudioError> {
        if source_rate_hz == 0 || target_rate_hz == 0 {
            return Err(AudioError::InvalidAudio("sample rates must be positive".into()));
        }
        let g = gcd(source_rate_hz as u64, target_rate_hz as u64);
        let up = target_rate_hz as u64 / g;
        let down = source_rate_hz as u64 / g;
        // Cutoff expressed in cycles per input sample.
        let cutoff = CUTOFF_FRACTION * source_rate_hz.min(target_rate_hz) as f64
            / source_rate_hz as f64;
        let half = (TAPS_PER_PHASE / 2) as f64;
        let phases = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut taps = [0.0; TAPS_PER_PHASE];
                for (k, tap) in taps.iter_mut().enumerate() {
                    let t = (k as f64 - (half - 1.0)) - frac;
                    *tap = 2.0 * cutoff * sinc(2.0 * cutoff * t) * kaiser(t, half, KAISER_BETA);
                }
                let sum: f64 = taps.iter().sum();
                for tap in taps.iter_mut() {
                    *tap /= sum;
                }
                taps
            })
            .collect();
        Ok(Self { up, down, phases })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    /// Linear filtering step without clamping.
    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let n_out = self.output_len(input.len()).max(1);
        let offset = TAPS_PER_PHASE as i64 / 2 - 1;
        (0..n_out as u64)
            .map(|j| {
                let num = j * self.down;
                let base = (num / self.up) as i64;
                let taps = &self.phases[(num % self.up) as usize];
                let start = base - offset;
                taps.iter()
                    .enumerate()
                    .filter_map(|(k, &h)| {
                        let m = start + k as i64;
                        (m >= 0 && (m as usize) < input.len()).then(|| h * input[m as usize])
                    })
                    .sum()
            })
            .collect()
    }
}

/// Converts `clip` to `target_rate_hz`. Output samples are clamped to `[-1, 1]`.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> Result<AudioClip, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::InvalidAudio("zero-length clip".into()));
    }
    if target_rate_hz == clip.sample_rate_hz() {
        return Ok(clip.clone());
    }
    let resampler = Resampler::new(clip.sample_rate_hz(), target_rate_hz)?;
    AudioClip::clamped(resampler.process(clip.samples()), target_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn i0_matches_reference_values() {
        // Abramowitz & Stegun table 9.8
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008).abs() < 1e-12);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_44).abs() < 1e-9);
    }

    #[test]
    fn halving_rate_halves_length() {
        let clip = AudioClip::new(sine(440.0, 44100, 44100, 0.5), 44100).unwrap();
        let out = resample(&clip, 22050).unwrap();
        assert_eq!(out.sample_rate_hz(), 22050);
        assert!((out.len() as i64 - 22050).abs() <= 1);
    }

    #[test]
    fn zero_clip_stays_zero() {
        let clip = AudioClip::new(vec![0.0; 1000], 48000).unwrap();
        let out = resample(&clip, 22050).unwrap();
        assert_eq!(out.len(), 459);
        assert!(out.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn upsampling_preserves_tone() {
        let clip = AudioClip::new(sine(300.0, 8000, 8000, 0.5), 8000).unwrap();
        let out = resample(&clip, 22050).unwrap();
        let ideal = sine(300.0, 22050, out.len(), 0.5);
        let guard = 64;
        let (mut sig, mut err) = (0.0, 0.0);
        for i in guard..out.len() - guard {
            sig += ideal[i] * ideal[i];
            err += (out.samples()[i] - ideal[i]).powi(2);
        }
        assert!(10.0 * (sig / err).log10() > 60.0);
    }

    #[test]
    fn each_phase_has_unit_gain() {
        let r = Resampler::new(48000, 22050).unwrap();
        assert_eq!(r.phases.len(), 147);
        for p in &r.phases {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn resampling_is_linear(
            xs in proptest::collection::vec(-0.4f64..0.4, 64..400),
            a in -2.0f64..2.0,
        ) {
            let r = Resampler::new(44100, 22050).unwrap();
            let base = r.process(&xs);
            let scaled: Vec<f64> = xs.iter().map(|x| a * x).collect();
            let out = r.process(&scaled);
            let scale = base.iter().fold(0.0f64, |m, b| m.max((a * b).abs())).max(1e-12);
            for (o, b) in out.iter().zip(&base) {
                prop_assert!((o - a * b).abs() <= 1e-9 * scale);
            }
        }
    }
}
