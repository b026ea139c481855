//! Loss-curve CSV: `label,iteration,loss,grad_maxnorm,margin_mean`, floats
//! written with 17 significant digits so they parse back bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::{CurveRecord, LossCurve};
use crate::error::{Error, Result};

pub const CURVE_HEADER: &str = "label,iteration,loss,grad_maxnorm,margin_mean";

pub fn write_curves(runs: &[(String, LossCurve)]) -> Result<String> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for (label, curve) in runs {
        if label.is_empty() || label.contains([',', '\n', '\r', '"']) {
            return Err(Error::invalid(
                "label",
                format!("`{label}` cannot be written as a CSV field"),
            ));
        }
        for r in &curve.records {
            let _ = writeln!(
                out,
                "{label},{},{:.16e},{:.16e},{:.16e}",
                r.iteration, r.loss, r.grad_maxnorm, r.margin_mean
            );
        }
    }
    Ok(out)
}

pub fn record_curves(runs: &[(String, LossCurve)], path: &Path) -> Result<()> {
    let text = write_curves(runs)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a curve file back, preserving label order of first appearance.
pub fn read_curves(path: &Path) -> Result<Vec<(String, LossCurve)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curves(&text)
}

pub fn parse_curves(text: &str) -> Result<Vec<(String, LossCurve)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{CURVE_HEADER}`"),
            })
        }
    }
    let mut runs: Vec<(String, LossCurve)> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| bad(format!("field {}: {e}", k + 1)))
        };
        let record = CurveRecord {
            iteration: fields[1]
                .parse()
                .map_err(|e| bad(format!("iteration: {e}")))?,
            loss: num(2)?,
            grad_maxnorm: num(3)?,
            margin_mean: num(4)?,
        };
        match runs.iter_mut().find(|(l, _)| l == fields[0]) {
            Some((_, c)) => c.records.push(record),
            None => runs.push((
                fields[0].to_string(),
                LossCurve {
                    records: vec![record],
                },
            )),
        }
    }
    Ok(runs)
}
