//! Template-generated toy corpora: each symbol is rendered as a short tone
//! and a space as a brief pause, so text and audio are aligned by
//! construction.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioClip, AudioError};

/// How symbols sound.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneVoice {
    pub sample_rate_hz: u32,
    /// Symbols in the order matching `freqs_hz`.
    pub alphabet: Vec<char>,
    pub freqs_hz: Vec<f64>,
    pub symbol_sec: f64,
    pub pause_sec: f64,
    pub amplitude: f64,
}

impl ToneVoice {
    /// Evenly spaced tones between `lo_hz` and `hi_hz`, one per symbol.
    pub fn evenly_spaced(alphabet: &[char], sample_rate_hz: u32, lo_hz: f64, hi_hz: f64) -> Self {
        let n = alphabet.len().max(2);
        Self {
            sample_rate_hz,
            alphabet: alphabet.to_vec(),
            freqs_hz: (0..alphabet.len())
                .map(|i| lo_hz + (hi_hz - lo_hz) * i as f64 / (n - 1) as f64)
                .collect(),
            symbol_sec: 0.15,
            pause_sec: 0.06,
            amplitude: 0.5,
        }
    }

    /// Same tone inventory, different symbols: symbol `k` of `alphabet`
    /// sounds like tone `k` of `self`.
    pub fn relabelled(&self, alphabet: &[char]) -> Self {
        assert_eq!(alphabet.len(), self.alphabet.len(), "relabelled alphabet must keep the inventory size");
        Self {
            alphabet: alphabet.to_vec(),
            ..self.clone()
        }
    }

    fn symbol_samples(&self) -> usize {
        (self.symbol_sec * self.sample_rate_hz as f64).round() as usize
    }

    /// Renders `text`; unknown characters other than space are skipped.
    pub fn render(&self, text: &str) -> Result<AudioClip, AudioError> {
        let rate = self.sample_rate_hz as f64;
        let n = self.symbol_samples();
        let ramp = (0.01 * rate).round().max(1.0) as usize;
        let pause = (self.pause_sec * rate).round() as usize;
        let mut out = Vec::new();
        for c in text.chars() {
            if c == ' ' {
                out.extend(std::iter::repeat_n(0.0, pause));
                continue;
            }
            let Some(k) = self.alphabet.iter().position(|&a| a == c) else { continue };
            let f = self.freqs_hz[k];
            for i in 0..n {
                let env = if i < ramp {
                    i as f64 / ramp as f64
                } else if i + ramp > n {
                    (n - i) as f64 / ramp as f64
                } else {
                    1.0
                };
                let t = i as f64 / rate;
                let s = (2.0 * PI * f * t).sin() + 0.3 * (4.0 * PI * f * t).sin();
                out.push(self.amplitude * env * s / 1.3);
            }
        }
        if out.is_empty() {
            out.push(0.0);
        }
        AudioClip::clamped(out, self.sample_rate_hz)
    }
}

/// Random words of 2–4 symbols joined by spaces, `min_symbols..=max_symbols`
/// letters in total.
pub fn random_text(alphabet: &[char], min_symbols: usize, max_symbols: usize, rng: &mut impl Rng) -> String {
    let total = rng.random_range(min_symbols..=max_symbols);
    let mut out = String::new();
    let mut placed = 0;
    while placed < total {
        if !out.is_empty() {
            out.push(' ');
        }
        let word = rng.random_range(2..=4).min(total - placed);
        for _ in 0..word {
            out.push(alphabet[rng.random_range(0..alphabet.len())]);
        }
        placed += word;
    }
    out
}

/// `n` (text, audio) pairs, reproducible from `seed`.
pub fn tone_corpus(
    voice: &ToneVoice,
    n: usize,
    min_symbols: usize,
    max_symbols: usize,
    seed: u64,
) -> Result<Vec<(String, AudioClip)>, AudioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let text = random_text(&voice.alphabet, min_symbols, max_symbols, &mut rng);
            let clip = voice.render(&text)?;
            Ok((text, clip))
        })
        .collect()
}

/// Adds `sec` seconds of digital silence to both ends.
pub fn pad_silence(clip: &AudioClip, sec: f64) -> Result<AudioClip, AudioError> {
    let pad = (sec * clip.sample_rate_hz() as f64).round() as usize;
    let mut s = vec![0.0; pad];
    s.extend_from_slice(clip.samples());
    s.extend(std::iter::repeat_n(0.0, pad));
    AudioClip::new(s, clip.sample_rate_hz())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_length_follows_text() {
        let v = ToneVoice::evenly_spaced(&['a', 'b', 'c'], 4000, 300.0, 1500.0);
        let clip = v.render("ab c").unwrap();
        assert_eq!(clip.len(), 3 * 600 + 240);
        assert!(clip.peak() <= 0.5 + 1e-12);
    }

    #[test]
    fn corpus_is_seeded() {
        let v = ToneVoice::evenly_spaced(&['a', 'b', 'c', 'd'], 4000, 300.0, 1500.0);
        let a = tone_corpus(&v, 5, 4, 8, 3).unwrap();
        assert_eq!(a, tone_corpus(&v, 5, 4, 8, 3).unwrap());
        for (text, _) in &a {
            let letters = text.chars().filter(|c| *c != ' ').count();
            assert!((4..=8).contains(&letters), "{text}");
            assert!(!text.starts_with(' ') && !text.ends_with(' ') && !text.contains("  "));
        }
    }

    #[test]
    fn relabelled_voice_sounds_identical() {
        let v = ToneVoice::evenly_spaced(&['a', 'b'], 4000, 300.0, 900.0);
        let w = v.relabelled(&['क', 'ख']);
        assert_eq!(v.render("ab ba").unwrap(), w.render("कख खक").unwrap());
    }

    #[test]
    fn padding_adds_both_ends() {
        let v = ToneVoice::evenly_spaced(&['a', 'b'], 4000, 300.0, 900.0);
        let c = v.render("ab").unwrap();
        let p = pad_silence(&c, 1.5).unwrap();
        assert_eq!(p.len(), c.len() + 12000);
        assert_eq!(&p.samples()[6000..6000 + c.len()], c.samples());
    }
}
