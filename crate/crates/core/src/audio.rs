//! Mono waveform container and 16-bit PCM WAV I/O.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav layout: {0}")]
    Unsupported(String),
}

/// A mono waveform. Samples are kept in `[-1, 1]` as f64.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidAudio("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(AudioError::InvalidAudio("clip has no samples".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::InvalidAudio(format!(
                "sample {i} = {s} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a clip after clamping every sample into `[-1, 1]`.
    pub fn clamped(mut samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        for s in samples.iter_mut() {
            if s.is_nan() {
                *s = 0.0;
            }
            *s = s.clamp(-1.0, 1.0);
        }
        Self::new(samples, sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }
}

/// Reads a mono 16-bit PCM WAV, mapping samples to `[-1, 1]` by dividing by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::Unsupported(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::Unsupported(format!(
            "{}-bit {:?}, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Duration of a WAV file from its header, without decoding the payload.
pub fn wav_duration_sec(path: impl AsRef<Path>) -> Result<f64, AudioError> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_empty() {
        assert!(AudioClip::new(vec![], 16000).is_err());
        assert!(AudioClip::new(vec![1.5], 16000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
        let c = AudioClip::clamped(vec![2.0, -3.0, 0.5], 8000).unwrap();
        assert_eq!(c.samples(), &[1.0, -1.0, 0.5]);
    }

    #[test]
    fn wav_round_trip_is_exact_on_pcm_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (-50..50).map(|i| i as f64 * 300.0 / 32768.0).collect();
        let clip = AudioClip::new(samples, 22050).unwrap();
        write_wav(&path, &clip).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, clip);
        assert!((wav_duration_sec(&path).unwrap() - 100.0 / 22050.0).abs() < 1e-12);
    }
}
