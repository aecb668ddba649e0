use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use crate::audio;
use crate::corpus::PrepError;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Audio path relative to the manifest's directory.
    pub audio_path: String,
    pub text: String,
    pub duration_sec: f64,
}

/// Writes `<path>\t<text>` lines with LF endings.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), PrepError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.audio_path);
        out.push('\t');
        out.push_str(&e.text);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| PrepError::io(path, e))
}

/// Parses manifest lines into `(audio_path, text)` pairs.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>, PrepError> {
    let body = std::fs::read_to_string(path).map_err(|e| PrepError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in body.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let (audio, text) = line.split_once('\t').ok_or_else(|| PrepError::BadManifestLine {
            line: i + 1,
            reason: "missing tab separator".into(),
        })?;
        if audio.is_empty() || text.trim().is_empty() {
            return Err(PrepError::BadManifestLine {
                line: i + 1,
                reason: "empty field".into(),
            });
        }
        rows.push((audio.to_owned(), text.to_owned()));
    }
    Ok(rows)
}

/// Reads a manifest and fills durations from the referenced WAV headers.
pub fn read_manifest_entries(path: &Path) -> Result<Vec<ManifestEntry>, PrepError> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|(audio_path, text)| {
            let duration_sec = audio::wav_duration_sec(base.join(&audio_path))?;
            Ok(ManifestEntry {
                audio_path,
                text,
                duration_sec,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub num_utterances: usize,
    pub total_duration_sec: f64,
    /// Distinct whitespace-separated tokens.
    pub word_vocab_size: usize,
    pub min_utterance_sec: f64,
    pub max_utterance_sec: f64,
    pub avg_utterance_sec: f64,
}

pub fn corpus_stats(entries: &[ManifestEntry]) -> Result<CorpusStats, PrepError> {
    if entries.is_empty() {
        return Err(PrepError::EmptyManifest);
    }
    let total: f64 = entries.iter().map(|e| e.duration_sec).sum();
    let min = entries.iter().map(|e| e.duration_sec).fold(f64::INFINITY, f64::min);
    let max = entries.iter().map(|e| e.duration_sec).fold(f64::NEG_INFINITY, f64::max);
    let vocab: HashSet<&str> = entries.iter().flat_map(|e| e.text.split_whitespace()).collect();
    Ok(CorpusStats {
        num_utterances: entries.len(),
        total_duration_sec: total,
        word_vocab_size: vocab.len(),
        min_utterance_sec: min,
        max_utterance_sec: max,
        // Clamp guards against the last-ulp drift of sum / n.
        avg_utterance_sec: (total / entries.len() as f64).clamp(min, max),
    })
}

/// Formats seconds as `2h 35min 17sec`.
pub fn format_duration(sec: f64) -> String {
    let total = sec.round() as u64;
    format!("{}h {}min {}sec", total / 3600, (total % 3600) / 60, total % 60)
}

impl CorpusStats {
    /// Machine-readable `key=value` block, one field per line.
    pub fn key_values(&self) -> String {
        format!(
            "num_utterances={}\ntotal_duration_sec={}\nword_vocab_size={}\nmin_utterance_sec={}\nmax_utterance_sec={}\navg_utterance_sec={}\n",
            self.num_utterances,
            self.total_duration_sec,
            self.word_vocab_size,
            self.min_utterance_sec,
            self.max_utterance_sec,
            self.avg_utterance_sec
        )
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("Number of utterances", self.num_utterances.to_string()),
            ("Total duration", format_duration(self.total_duration_sec)),
            ("Vocabulary size", self.word_vocab_size.to_string()),
            ("Minimum length of utterance", format!("{:.2} sec", self.min_utterance_sec)),
            ("Maximum length of utterance", format!("{:.2} sec", self.max_utterance_sec)),
            ("Average length of utterance", format!("{:.2} sec", self.avg_utterance_sec)),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<30}{v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(d: f64, text: &str) -> ManifestEntry {
        ManifestEntry {
            audio_path: "a.wav".into(),
            text: text.into(),
            duration_sec: d,
        }
    }

    #[test]
    fn two_entries() {
        let s = corpus_stats(&[entry(3.0, "क ख"), entry(5.0, "ख ग")]).unwrap();
        assert_eq!(
            s,
            CorpusStats {
                num_utterances: 2,
                total_duration_sec: 8.0,
                word_vocab_size: 3,
                min_utterance_sec: 3.0,
                max_utterance_sec: 5.0,
                avg_utterance_sec: 4.0,
            }
        );
    }

    #[test]
    fn duplicates_scale_duration_only() {
        let one = corpus_stats(&[entry(2.5, "अ आ इ")]).unwrap();
        let many = corpus_stats(&vec![entry(2.5, "अ आ इ"); 7]).unwrap();
        assert_eq!(one.word_vocab_size, many.word_vocab_size);
        assert_eq!(many.total_duration_sec, 7.0 * 2.5);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(corpus_stats(&[]), Err(PrepError::EmptyManifest)));
    }

    #[test]
    fn duration_format_matches_table_style() {
        // 2 h 35 min 17 s
        assert_eq!(format_duration(9317.0), "2h 35min 17sec");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write_manifest(&p, &[entry(1.0, "क ख"), entry(2.0, "ग")]).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        assert_eq!(body, "a.wav\tक ख\na.wav\tग\n");
        let rows = read_manifest(&p).unwrap();
        assert_eq!(rows[1], ("a.wav".to_string(), "ग".to_string()));
        std::fs::write(&p, "no-tab-here\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(PrepError::BadManifestLine { line: 1, .. })));
    }
}
