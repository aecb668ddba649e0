//! Energy-based voice activity detection, silence trimming and
//! silence-guided segmentation.

use std::ops::Range;

use crate::audio::AudioClip;
use crate::corpus::PrepError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Frame energy threshold in dB relative to the loudest frame.
    pub threshold_db: f64,
    pub max_internal_silence_sec: f64,
    /// Gaps shorter than this are never treated as silence.
    pub min_silence_run_sec: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            threshold_db: -40.0,
            max_internal_silence_sec: 0.5,
            min_silence_run_sec: 0.2,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), PrepError> {
        let ok = self.hop_ms > 0.0
            && self.frame_ms >= self.hop_ms
            && self.max_internal_silence_sec > 0.0
            && self.min_silence_run_sec >= 0.0
            && self.threshold_db.is_finite();
        if ok {
            Ok(())
        } else {
            Err(PrepError::InvalidConfig(format!("{self:?}")))
        }
    }

    fn frame_len(&self, rate: u32) -> usize {
        ((self.frame_ms * rate as f64 / 1000.0).round() as usize).max(1)
    }

    fn hop_len(&self, rate: u32) -> usize {
        ((self.hop_ms * rate as f64 / 1000.0).round() as usize).max(1)
    }
}

/// Voiced sample ranges of `clip`, sorted and non-overlapping.
///
/// Frames are classified by mean-square energy against the loudest frame.
/// The edges of each voiced run are then tightened to the first and last
/// sample whose magnitude clears the same threshold relative to the peak
/// sample, and gaps shorter than `min_silence_run_sec` are closed.
pub fn voiced_regions(clip: &AudioClip, cfg: &VadConfig) -> Result<Vec<Range<usize>>, PrepError> {
    cfg.validate()?;
    let x = clip.samples();
    let rate = clip.sample_rate_hz();
    let frame = cfg.frame_len(rate);
    let hop = cfg.hop_len(rate);
    if x.len() <= frame {
        return Err(PrepError::ClipTooShort {
            samples: x.len(),
            frame,
        });
    }

    let mut starts: Vec<usize> = (0..=(x.len() - frame) / hop).map(|k| k * hop).collect();
    if starts.last().is_some_and(|&s| s + frame < x.len()) {
        starts.push(x.len() - frame);
    }
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| x[s..s + frame].iter().map(|v| v * v).sum::<f64>() / frame as f64)
        .collect();
    let peak_energy = energies.iter().cloned().fold(0.0, f64::max);
    if peak_energy <= 0.0 {
        return Err(PrepError::EmptyAfterTrim);
    }
    let energy_floor = peak_energy * 10f64.powf(cfg.threshold_db / 10.0);

    let mut coarse = vec![false; x.len()];
    for (&s, &e) in starts.iter().zip(&energies) {
        if e > 0.0 && e >= energy_floor {
            coarse[s..s + frame].iter_mut().for_each(|v| *v = true);
        }
    }

    let amp_floor = clip.peak() * 10f64.powf(cfg.threshold_db / 20.0);
    let mut regions: Vec<Range<usize>> = Vec::new();
    let mut i = 0;
    while i < x.len() {
        if !coarse[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < x.len() && coarse[j] {
            j += 1;
        }
        let (mut a, mut b) = (i, j);
        while a < b && x[a].abs() < amp_floor {
            a += 1;
        }
        while b > a && x[b - 1].abs() < amp_floor {
            b -= 1;
        }
        if a < b {
            regions.push(a..b);
        }
        i = j;
    }
    if regions.is_empty() {
        return Err(PrepError::EmptyAfterTrim);
    }

    let min_gap = (cfg.min_silence_run_sec * rate as f64).round() as usize;
    let mut merged: Vec<Range<usize>> = Vec::with_capacity(regions.len());
    for r in regions {
        match merged.last_mut() {
            Some(last) if r.start - last.end < min_gap => last.end = r.end,
            _ => merged.push(r),
        }
    }
    Ok(merged)
}

/// Interior silent runs: the gaps between consecutive voiced regions.
pub fn silent_runs(clip: &AudioClip, cfg: &VadConfig) -> Result<Vec<Range<usize>>, PrepError> {
    let regions = voiced_regions(clip, cfg)?;
    Ok(regions.windows(2).map(|w| w[0].end..w[1].start).collect())
}

/// Removes leading and trailing silence and caps every interior silence at
/// `max_internal_silence_sec`. Voiced samples are copied verbatim.
pub fn trim_silences(clip: &AudioClip, cfg: &VadConfig) -> Result<AudioClip, PrepError> {
    let regions = voiced_regions(clip, cfg)?;
    let x = clip.samples();
    let cap = (cfg.max_internal_silence_sec * clip.sample_rate_hz() as f64).round() as usize;
    let mut out = Vec::with_capacity(x.len());
    for (k, r) in regions.iter().enumerate() {
        if k > 0 {
            let gap = regions[k - 1].end..r.start;
            if gap.len() <= cap {
                out.extend_from_slice(&x[gap]);
            } else {
                let head = cap / 2;
                let tail = cap - head;
                out.extend_from_slice(&x[gap.start..gap.start + head]);
                out.extend_from_slice(&x[gap.end - tail..gap.end]);
            }
        }
        out.extend_from_slice(&x[r.clone()]);
    }
    Ok(AudioClip::new(out, clip.sample_rate_hz())?)
}

/// One aligned (audio, transcript) chunk produced by [`segment`].
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub clip: AudioClip,
    pub text: String,
    /// Sample span of this chunk within the source clip.
    pub span: Range<usize>,
}

pub const DANDA: char = '\u{0964}';
pub const DOUBLE_DANDA: char = '\u{0965}';

/// Splits a transcript at danda / double danda, trimming each piece and
/// dropping empty ones.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split([DANDA, DOUBLE_DANDA])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Cuts a trimmed clip into chunks no longer than `max_chunk_sec`, pairing
/// each with one danda-delimited sentence of `raw_text`.
///
/// With `k` sentences the clip is cut inside its `k - 1` longest interior
/// silences; the cut silences belong to no chunk.
pub fn segment(
    clip: &AudioClip,
    raw_text: &str,
    max_chunk_sec: f64,
    cfg: &VadConfig,
) -> Result<Vec<Chunk>, PrepError> {
    if !(max_chunk_sec > 0.0) {
        return Err(PrepError::InvalidConfig(format!(
            "max_chunk_sec must be positive, got {max_chunk_sec}"
        )));
    }
    let sentences = split_sentences(raw_text);
    if sentences.is_empty() {
        return Err(PrepError::EmptyText);
    }
    let rate = clip.sample_rate_hz() as f64;
    let max_len = (max_chunk_sec * rate).floor() as usize;

    if sentences.len() == 1 && clip.len() <= max_len {
        return Ok(vec![Chunk {
            clip: clip.clone(),
            text: sentences.into_iter().next().unwrap(),
            span: 0..clip.len(),
        }]);
    }

    let gaps = silent_runs(clip, cfg)?;
    let wanted = sentences.len() - 1;
    if wanted == 0 {
        return Err(if gaps.is_empty() {
            PrepError::UnsplittableSpan {
                duration_sec: clip.duration_sec(),
                max_chunk_sec,
            }
        } else {
            PrepError::AlignmentMismatch {
                audio: gaps.len() + 1,
                text: 1,
            }
        });
    }
    if gaps.len() < wanted {
        return Err(PrepError::AlignmentMismatch {
            audio: gaps.len() + 1,
            text: sentences.len(),
        });
    }

    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&a, &b| gaps[b].len().cmp(&gaps[a].len()).then(a.cmp(&b)));
    let mut cuts: Vec<Range<usize>> = order[..wanted].iter().map(|&i| gaps[i].clone()).collect();
    cuts.sort_by_key(|r| r.start);

    let mut bounds = Vec::with_capacity(sentences.len());
    let mut start = 0;
    for cut in &cuts {
        bounds.push(start..cut.start);
        start = cut.end;
    }
    bounds.push(start..clip.len());

    let x = clip.samples();
    bounds
        .into_iter()
        .zip(sentences)
        .map(|(span, text)| {
            if span.len() > max_len {
                return Err(PrepError::UnsplittableSpan {
                    duration_sec: span.len() as f64 / rate,
                    max_chunk_sec,
                });
            }
            Ok(Chunk {
                clip: AudioClip::new(x[span.clone()].to_vec(), clip.sample_rate_hz())?,
                text,
                span,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const RATE: u32 = 16000;

    fn tone(sec: f64) -> Vec<f64> {
        let n = (sec * RATE as f64).round() as usize;
        (0..n)
            .map(|i| 0.5 * (2.0 * PI * 220.0 * i as f64 / RATE as f64 + 0.3).sin())
            .collect()
    }

    fn silence(sec: f64) -> Vec<f64> {
        vec![0.0; (sec * RATE as f64).round() as usize]
    }

    fn build(parts: &[Vec<f64>]) -> AudioClip {
        AudioClip::new(parts.concat(), RATE).unwrap()
    }

    #[test]
    fn strips_edges() {
        let clip = build(&[silence(1.0), tone(2.0), silence(1.0)]);
        let out = trim_silences(&clip, &VadConfig::default()).unwrap();
        assert!((out.duration_sec() - 2.0).abs() <= 0.025);
        let start = RATE as usize;
        let voiced = &clip.samples()[start..start + out.len()];
        assert_eq!(voiced, out.samples());
    }

    #[test]
    fn no_silence_is_noop() {
        let clip = build(&[tone(1.5)]);
        let out = trim_silences(&clip, &VadConfig::default()).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn caps_interior_gap() {
        let clip = build(&[tone(1.0), silence(0.8), tone(1.0)]);
        let out = trim_silences(&clip, &VadConfig::default()).unwrap();
        assert!((out.duration_sec() - 2.5).abs() <= 0.025);
        let gaps = silent_runs(&out, &VadConfig::default()).unwrap();
        assert_eq!(gaps.len(), 1);
        assert!((gaps[0].len() as f64 / RATE as f64 - 0.5).abs() <= 0.025);
    }

    #[test]
    fn short_gap_is_kept() {
        let clip = build(&[tone(1.0), silence(0.1), tone(1.0)]);
        let out = trim_silences(&clip, &VadConfig::default()).unwrap();
        assert_eq!(out, clip);
        assert!(silent_runs(&clip, &VadConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn all_silent_is_error() {
        let clip = build(&[silence(1.0)]);
        assert!(matches!(
            trim_silences(&clip, &VadConfig::default()),
            Err(PrepError::EmptyAfterTrim)
        ));
    }

    #[test]
    fn too_short_is_error() {
        let clip = build(&[tone(0.01)]);
        assert!(matches!(
            trim_silences(&clip, &VadConfig::default()),
            Err(PrepError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn segment_single_piece() {
        let clip = build(&[tone(4.0)]);
        let chunks = segment(&clip, "अयम्", 10.0, &VadConfig::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, "अयम्");
        assert_eq!(chunks[0].clip, clip);
    }

    #[test]
    fn segment_two_sentences_at_gap() {
        let clip = build(&[tone(5.0), silence(0.4), tone(6.0)]);
        let chunks = segment(&clip, "A। B॥", 10.0, &VadConfig::default()).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].text, "A");
        assert_eq!(chunks[1].text, "B");
        for c in &chunks {
            assert!(c.clip.duration_sec() <= 10.0);
        }
        assert!((chunks[0].clip.duration_sec() - 5.0).abs() < 0.025);
        assert!((chunks[1].clip.duration_sec() - 6.0).abs() < 0.025);
    }

    #[test]
    fn segment_long_voiced_span() {
        let clip = build(&[tone(12.0)]);
        assert!(matches!(
            segment(&clip, "अयम्", 10.0, &VadConfig::default()),
            Err(PrepError::UnsplittableSpan { .. })
        ));
    }

    #[test]
    fn segment_mismatch() {
        let clip = build(&[tone(3.0)]);
        assert!(matches!(
            segment(&clip, "A। B। C।", 10.0, &VadConfig::default()),
            Err(PrepError::AlignmentMismatch { audio: 1, text: 3 })
        ));
    }

    #[test]
    fn segment_prefers_longest_gaps() {
        let clip = build(&[
            tone(1.0),
            silence(0.25),
            tone(1.0),
            silence(0.45),
            tone(1.0),
        ]);
        let chunks = segment(&clip, "A। B।", 10.0, &VadConfig::default()).unwrap();
        assert_eq!(chunks.len(), 2);
        assert!((chunks[0].clip.duration_sec() - 2.25).abs() < 0.025);
    }

    fn clip_strategy() -> impl Strategy<Value = AudioClip> {
        proptest::collection::vec((0.05f64..1.2, 0.3f64..1.0), 1..4).prop_map(|parts| {
            let mut v = silence(0.3);
            for (gap, dur) in parts {
                v.extend(tone(dur));
                v.extend(silence(gap));
            }
            AudioClip::new(v, RATE).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn trimming_is_idempotent(clip in clip_strategy()) {
            let cfg = VadConfig::default();
            let once = trim_silences(&clip, &cfg).unwrap();
            let twice = trim_silences(&once, &cfg).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn segment_round_trip_restores_duration(clip in clip_strategy()) {
            let cfg = VadConfig::default();
            let trimmed = trim_silences(&clip, &cfg).unwrap();
            let n_pieces = silent_runs(&trimmed, &cfg).unwrap().len() + 1;
            let text: Vec<String> = (0..n_pieces).map(|i| format!("s{i}")).collect();
            let chunks = segment(&trimmed, &text.join(" । "), 10.0, &cfg).unwrap();
            prop_assert_eq!(chunks.len(), n_pieces);
            let mut total = 0;
            let mut prev_end = None;
            for c in &chunks {
                total += c.clip.len();
                if let Some(end) = prev_end {
                    total += c.span.start - end;
                }
                prev_end = Some(c.span.end);
            }
            let hop = (cfg.hop_ms * RATE as f64 / 1000.0) as usize;
            prop_assert!(total.abs_diff(trimmed.len()) <= hop);
            let joined: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
            prop_assert_eq!(joined.join(" "), text.join(" "));
        }
    }
}
