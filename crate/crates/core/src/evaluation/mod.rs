//! Alignment diagonality, loss-curve export and listening-test statistics.

mod alignment;
mod mos;
mod plot;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use alignment::{diagonality, AlignmentMatrix};
pub use mos::{
    implied_std_dev, mos_report, overall_mos, parse_mos_csv, report_from_rater_means, student_t_quantile,
    MosDimension, MosReport, MosSample,
};
pub use plot::{export_loss_plot, loss_log_csv, loss_plot_svg, parse_loss_log};

/// Band half-width used when none is given.
pub const DEFAULT_BAND: f64 = 0.15;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("alignment matrix is empty")]
    EmptyAlignment,
    #[error("alignment row {row} is not a probability vector: {reason}")]
    NotStochastic { row: usize, reason: String },
    #[error("band must lie in (0, 1], got {0}")]
    InvalidBand(f64),
    #[error("malformed alignment file: {0}")]
    BadAlignmentFile(String),
    #[error("need at least 2 raters, got {n}")]
    InsufficientRaters { n: usize },
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("line {line}: score {score:?} outside 1..=5")]
    InvalidScore { line: usize, score: String },
    #[error("line {line}: {reason}")]
    BadMosLine { line: usize, reason: String },
    #[error("loss log line {line}: {reason}")]
    BadLossLog { line: usize, reason: String },
    #[error("loss log is empty")]
    EmptyLog,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
