//! Corpus preparation: resampling, silence trimming, transcript
//! normalisation, segmentation, manifests and corpus statistics.

mod manifest;
mod resample;
mod silence;
mod text;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{self, AudioError};

pub use manifest::{
    corpus_stats, format_duration, read_manifest, read_manifest_entries, write_manifest,
    CorpusStats, ManifestEntry,
};
pub use resample::{resample, Resampler, CUTOFF_FRACTION, KAISER_BETA, TAPS_PER_PHASE};
pub use silence::{
    segment, silent_runs, split_sentences, trim_silences, voiced_regions, Chunk, VadConfig, DANDA,
    DOUBLE_DANDA,
};
pub use text::{clean_text, normalize_text, SymbolSequence, SymbolTable, EOS_GLYPH, PAD_ID};

#[derive(Debug, Error)]
pub enum PrepError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("clip of {samples} samples is not longer than one analysis frame ({frame})")]
    ClipTooShort { samples: usize, frame: usize },
    #[error("clip is entirely silent under the VAD threshold")]
    EmptyAfterTrim,
    #[error("transcript is empty after normalisation")]
    EmptyText,
    #[error("symbol {0:?} (U+{code:04X}) is not in the symbol table", code = *.0 as u32)]
    UnknownSymbol(char),
    #[error("duplicate symbol {0:?} in table")]
    DuplicateSymbol(char),
    #[error("symbol sequence must end with exactly one EOS")]
    MissingEos,
    #[error("symbol id {0} outside the table")]
    IdOutOfRange(usize),
    #[error("{audio} audio pieces but {text} text pieces")]
    AlignmentMismatch { audio: usize, text: usize },
    #[error("voiced span of {duration_sec:.2}s exceeds the {max_chunk_sec}s chunk limit")]
    UnsplittableSpan { duration_sec: f64, max_chunk_sec: f64 },
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("manifest line {line}: {reason}")]
    BadManifestLine { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PrepError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Settings for [`prepare_directory`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub target_rate_hz: u32,
    pub max_chunk_sec: f64,
    pub vad: VadConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: 22050,
            max_chunk_sec: 10.0,
            vad: VadConfig::default(),
        }
    }
}

/// Runs resample → trim → segment over every `<stem>.wav` / `<stem>.txt`
/// pair in `in_dir`, writing chunk WAVs under `out_dir/wavs/` and the
/// manifest to `out_dir/manifest.tsv`. Entries keep input order.
pub fn prepare_directory(
    in_dir: &Path,
    out_dir: &Path,
    cfg: &PrepConfig,
) -> Result<Vec<ManifestEntry>, PrepError> {
    let mut stems: Vec<PathBuf> = std::fs::read_dir(in_dir)
        .map_err(|e| PrepError::io(in_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    stems.sort();
    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| PrepError::io(&wav_dir, e))?;

    let per_file: Vec<Vec<ManifestEntry>> = stems
        .par_iter()
        .map(|wav| -> Result<Vec<ManifestEntry>, PrepError> {
            let txt = wav.with_extension("txt");
            let raw = std::fs::read_to_string(&txt).map_err(|e| PrepError::io(&txt, e))?;
            let clip = audio::read_wav(wav)?;
            let clip = resample(&clip, cfg.target_rate_hz)?;
            let clip = trim_silences(&clip, &cfg.vad)?;
            let chunks = segment(&clip, &raw, cfg.max_chunk_sec, &cfg.vad)?;
            let stem = wav.file_stem().unwrap_or_default().to_string_lossy();
            chunks
                .into_iter()
                .enumerate()
                .map(|(k, chunk)| {
                    let rel = format!("wavs/{stem}_{k:03}.wav");
                    let text = clean_text(&chunk.text);
                    if text.is_empty() {
                        return Err(PrepError::EmptyText);
                    }
                    audio::write_wav(out_dir.join(&rel), &chunk.clip)?;
                    Ok(ManifestEntry {
                        audio_path: rel,
                        text,
                        duration_sec: chunk.clip.duration_sec(),
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let entries: Vec<ManifestEntry> = per_file.into_iter().flatten().collect();
    write_manifest(&out_dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}
