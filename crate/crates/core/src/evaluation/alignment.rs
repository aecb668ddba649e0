use std::fmt::Write as _;

use crate::evaluation::EvalError;
use crate::matrix::Matrix;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Attention weights, decoder steps × encoder steps. Every row is a
/// probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    values: Matrix,
}

impl AlignmentMatrix {
    pub fn new(values: Matrix) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::EmptyAlignment);
        }
        for (t, row) in values.iter_rows().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(EvalError::NotStochastic {
                    row: t,
                    reason: "negative or non-finite weight".into(),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(EvalError::NotStochastic {
                    row: t,
                    reason: format!("row sums to {sum}"),
                });
            }
        }
        Ok(Self { values })
    }

    /// Divides every row by its sum; all-zero rows become uniform.
    pub fn normalized(mut values: Matrix) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::EmptyAlignment);
        }
        let n = values.cols();
        for r in 0..values.rows() {
            let row = values.row_mut(r);
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(EvalError::NotStochastic {
                    row: r,
                    reason: "negative or non-finite weight".into(),
                });
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn n_dec_steps(&self) -> usize {
        self.values.rows()
    }

    pub fn n_enc_steps(&self) -> usize {
        self.values.cols()
    }

    /// Comma-separated rows, one line per decoder step.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.iter_rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EvalError::BadAlignmentFile(format!("line {}: {e}", i + 1)))?;
            if let Some(first) = rows.first().map(Vec::len) {
                if row.len() != first {
                    return Err(EvalError::BadAlignmentFile(format!("line {}: ragged row", i + 1)));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(EvalError::EmptyAlignment);
        }
        Self::normalized(Matrix::from_rows(&rows))
    }

    /// Binary 8-bit greyscale PGM, one image row per decoder step, each
    /// row scaled so that its largest weight is white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (rows, cols) = self.values.shape();
        let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        for row in self.values.iter_rows() {
            let peak = row.iter().cloned().fold(0.0, f64::max);
            out.extend(row.iter().map(|v| {
                if peak > 0.0 {
                    (v / peak * 255.0).round() as u8
                } else {
                    0
                }
            }));
        }
        out
    }

    /// Reads a binary PGM and renormalises each row to a probability vector.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, EvalError> {
        let bad = |m: &str| EvalError::BadAlignmentFile(m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
        let (cols, rows, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if data.len() < rows * cols {
            return Err(bad("truncated pixel data"));
        }
        let values = Matrix::from_vec(rows, cols, data[..rows * cols].iter().map(|&b| f64::from(b)).collect());
        Self::normalized(values)
    }
}

/// Mean attention mass per decoder step inside a diagonal band of
/// half-width `band` in normalised coordinates. With a single decoder or
/// encoder step every cell counts as in-band.
pub fn diagonality(a: &AlignmentMatrix, band: f64) -> Result<f64, EvalError> {
    if !(band > 0.0 && band <= 1.0) {
        return Err(EvalError::InvalidBand(band));
    }
    let (t_len, n_len) = a.values.shape();
    if t_len == 0 || n_len == 0 {
        return Err(EvalError::EmptyAlignment);
    }
    let pos = |i: usize, len: usize| if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
    let mut total = 0.0;
    for (t, row) in a.values.iter_rows().enumerate() {
        let y = pos(t, t_len);
        total += row
            .iter()
            .enumerate()
            .filter(|&(i, _)| t_len == 1 || n_len == 1 || (pos(i, n_len) - y).abs() <= band)
            .map(|(_, w)| w)
            .sum::<f64>();
    }
    Ok(total / t_len as f64)
}
