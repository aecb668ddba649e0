use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::evaluation::EvalError;
use crate::trainer::LossRecord;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

/// `iteration,train_loss,val_loss,lr`; `val_loss` is empty when absent.
pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("iteration,train_loss,val_loss,lr\n");
    for r in records {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.train_loss, val, r.lr);
    }
    out
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossRecord>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "iteration,train_loss,val_loss,lr" => {}
        _ => return Err(EvalError::BadLossLog { line: 1, reason: "missing header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: String| EvalError::BadLossLog { line: i + 1, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        out.push(LossRecord {
            iteration: f[0].trim().parse().map_err(|_| bad(format!("bad iteration {:?}", f[0])))?,
            train_loss: num(f[1])?,
            val_loss: if f[2].trim().is_empty() { None } else { Some(num(f[2])?) },
            lr: num(f[3])?,
        });
    }
    Ok(out)
}

fn polyline(points: &[(f64, f64)], x: &impl Fn(f64) -> f64, y: &impl Fn(f64) -> f64, colour: &str) -> String {
    let pts: Vec<String> = points.iter().map(|&(a, b)| format!("{:.2},{:.2}", x(a), y(b))).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// SVG line chart of training loss and, when present, validation loss
/// against iteration.
pub fn loss_plot_svg(records: &[LossRecord]) -> Result<String, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let train: Vec<(f64, f64)> = records.iter().map(|r| (r.iteration as f64, r.train_loss)).collect();
    let val: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.val_loss.map(|v| (r.iteration as f64, v)))
        .collect();
    let finite = train.iter().chain(&val).map(|p| p.1).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let x0 = train[0].0;
    let x1 = train[train.len() - 1].0.max(x0 + 1.0);
    let x = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let y = |v: f64| HEIGHT - MARGIN - (v - lo) / (hi - lo) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>",
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">iteration ({x0}..{x1})</text>",
        WIDTH / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(svg, "<text x=\"10\" y=\"{}\" font-size=\"12\">{hi:.4}</text>", MARGIN);
    let _ = writeln!(svg, "<text x=\"10\" y=\"{}\" font-size=\"12\">{lo:.4}</text>", HEIGHT - MARGIN);
    svg.push_str(&polyline(&train, &x, &y, "steelblue"));
    if !val.is_empty() {
        svg.push_str(&polyline(&val, &x, &y, "darkorange"));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes `<stem>.csv` and `<stem>.svg` next to `out_path` and returns both
/// paths.
pub fn export_loss_plot(records: &[LossRecord], out_path: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    let svg = loss_plot_svg(records)?;
    let csv_path = out_path.with_extension("csv");
    let svg_path = out_path.with_extension("svg");
    std::fs::write(&csv_path, loss_log_csv(records)).map_err(|e| EvalError::io(&csv_path, e))?;
    std::fs::write(&svg_path, svg).map_err(|e| EvalError::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}
