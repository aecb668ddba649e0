use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::evaluation::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MosDimension {
    Naturalness,
    Pronunciation,
}

impl MosDimension {
    pub const ALL: [MosDimension; 2] = [MosDimension::Naturalness, MosDimension::Pronunciation];
}

impl fmt::Display for MosDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MosDimension::Naturalness => "naturalness",
            MosDimension::Pronunciation => "pronunciation",
        })
    }
}

impl FromStr for MosDimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naturalness" => Ok(MosDimension::Naturalness),
            "pronunciation" => Ok(MosDimension::Pronunciation),
            other => Err(format!("unknown dimension {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MosSample {
    pub rater_id: String,
    pub utterance_id: String,
    pub dimension: MosDimension,
    pub score: u8,
}

/// Parses `rater_id,utterance_id,dimension,score` with a header line.
pub fn parse_mos_csv(text: &str) -> Result<Vec<MosSample>, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(EvalError::InsufficientRaters { n: 0 })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["rater_id", "utterance_id", "dimension", "score"] {
        return Err(EvalError::BadMosLine {
            line: 1,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |reason: String| EvalError::BadMosLine { line: i + 1, reason };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let dimension = f[2].parse().map_err(bad)?;
        let score: u8 = f[3].parse().map_err(|_| bad(format!("score {:?} is not an integer", f[3])))?;
        if !(1..=5).contains(&score) {
            return Err(EvalError::InvalidScore { line: i + 1, score: f[3].to_string() });
        }
        out.push(MosSample {
            rater_id: f[0].to_string(),
            utterance_id: f[1].to_string(),
            dimension,
            score,
        });
    }
    Ok(out)
}

/// Two-sided Student-t critical value: the `p` quantile with `df` degrees
/// of freedom.
pub fn student_t_quantile(p: f64, df: f64) -> Result<f64, EvalError> {
    if !(p > 0.0 && p < 1.0) || !(df > 0.0) {
        return Err(EvalError::InvalidConfidence(p));
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| EvalError::InvalidConfidence(p))?;
    Ok(dist.inverse_cdf(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosReport {
    pub dimension: Option<MosDimension>,
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub t_critical: f64,
    pub half_width: f64,
    pub confidence: f64,
    /// Set when every rater mean is identical, so the interval is empty.
    pub zero_variance: bool,
    pub per_rater: Vec<(String, f64)>,
}

impl fmt::Display for MosReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dim = self.dimension.map_or("all".to_string(), |d| d.to_string());
        write!(
            f,
            "{dim}: {:.2} ± {:.2} (n={}, s={:.4}, t={:.4}, {:.0}% CI)",
            self.mean,
            self.half_width,
            self.n,
            self.std_dev,
            self.t_critical,
            self.confidence * 100.0
        )?;
        if self.zero_variance {
            write!(f, " [zero-variance]")?;
        }
        Ok(())
    }
}

/// Confidence interval over per-rater means.
pub fn report_from_rater_means(
    per_rater: Vec<(String, f64)>,
    confidence: f64,
) -> Result<MosReport, EvalError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvalError::InvalidConfidence(confidence));
    }
    let n = per_rater.len();
    if n < 2 {
        return Err(EvalError::InsufficientRaters { n });
    }
    let mean = per_rater.iter().map(|(_, m)| m).sum::<f64>() / n as f64;
    let var = per_rater.iter().map(|(_, m)| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    let t_critical = student_t_quantile((1.0 + confidence) / 2.0, (n - 1) as f64)?;
    Ok(MosReport {
        dimension: None,
        n,
        mean,
        std_dev,
        t_critical,
        half_width: t_critical * std_dev / (n as f64).sqrt(),
        confidence,
        zero_variance: std_dev == 0.0,
        per_rater,
    })
}

/// Averages each rater's scores on `dimension`, then builds the interval
/// over raters.
pub fn mos_report(
    samples: &[MosSample],
    dimension: MosDimension,
    confidence: f64,
) -> Result<MosReport, EvalError> {
    let mut by_rater: BTreeMap<&str, (u32, usize)> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.dimension == dimension) {
        let e = by_rater.entry(&s.rater_id).or_default();
        e.0 += u32::from(s.score);
        e.1 += 1;
    }
    let per_rater = by_rater
        .into_iter()
        .map(|(r, (sum, k))| (r.to_string(), f64::from(sum) / k as f64))
        .collect();
    let mut report = report_from_rater_means(per_rater, confidence)?;
    report.dimension = Some(dimension);
    Ok(report)
}

/// Unweighted mean of the per-dimension means.
pub fn overall_mos(reports: &[MosReport]) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64)
}

/// Rater standard deviation implied by a published `mean ± half_width`
/// interval over `n` raters.
pub fn implied_std_dev(n: usize, half_width: f64, confidence: f64) -> Result<f64, EvalError> {
    if n < 2 {
        return Err(EvalError::InsufficientRaters { n });
    }
    let t = student_t_quantile((1.0 + confidence) / 2.0, (n - 1) as f64)?;
    Ok(half_width * (n as f64).sqrt() / t)
}
