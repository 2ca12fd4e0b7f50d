//! Metrics for inspecting attention maps, normalizer statistics, and
//! training traces, plus a small grayscale image writer for heatmaps.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::CoreError;
use crate::grid::GridGeometry;
use crate::norm::NormStats;
use crate::tensor::{Tensor, TokenTensor};

/// Attention-weighted mean Euclidean distance, in patch units:
/// `(1/T) * sum_i sum_j A[i][j] * dist(i, j)` on the full grid of `g`.
/// Rows of `A` must sum to 1 within 1e-4.
pub fn mean_attention_distance(a: &Tensor, g: &GridGeometry) -> Result<f64, CoreError> {
    let t = g.tokens();
    if a.shape() != [t, t] {
        return Err(CoreError::ShapeMismatch {
            context: "mean_attention_distance",
            left: a.shape().to_vec(),
            right: vec![t, t],
        });
    }
    if let Some((index, value)) = a.first_non_finite() {
        return Err(CoreError::NonFinite {
            context: "attention matrix",
            index,
            value,
        });
    }
    let cols = g.cols();
    let mut total = 0.0;
    for i in 0..t {
        let row = &a.data()[i * t..(i + 1) * t];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(CoreError::invalid(format!(
                "attention row {i} sums to {sum}, expected 1 within 1e-4"
            )));
        }
        if row.iter().any(|v| *v < 0.0) {
            return Err(CoreError::invalid(format!(
                "attention row {i} has a negative entry"
            )));
        }
        let (ri, ci) = ((i / cols) as f64, (i % cols) as f64);
        for (j, &w) in row.iter().enumerate() {
            let (rj, cj) = ((j / cols) as f64, (j % cols) as f64);
            let dr = rj - ri;
            let dc = cj - ci;
            total += w * (dr * dr + dc * dc).sqrt();
        }
    }
    Ok(total / t as f64)
}

/// Mean of `|x - mean| / max(|x|, 1e-8)` over every entry: how far
/// entries sit from the statistics that will recentre them.
pub fn variation_coefficient(x: &TokenTensor, stats: &NormStats) -> Result<f64, CoreError> {
    if stats.mean.shape() != x.tensor().shape() {
        return Err(CoreError::ShapeMismatch {
            context: "variation_coefficient",
            left: x.tensor().shape().to_vec(),
            right: stats.mean.shape().to_vec(),
        });
    }
    let n = x.tensor().numel() as f64;
    let total: f64 = x
        .tensor()
        .data()
        .iter()
        .zip(stats.mean.data())
        .map(|(v, m)| (v - m).abs() / v.abs().max(1e-8))
        .sum();
    Ok(total / n)
}

/// Per-head token L2 norms, shape `(B, H, T)`.
pub fn token_magnitude(x: &TokenTensor, heads: usize) -> Result<Tensor, CoreError> {
    let (b, t, c) = (x.batch(), x.tokens(), x.channels());
    if heads == 0 || c % heads != 0 {
        return Err(CoreError::invalid(format!(
            "channel count {c} not divisible by {heads} heads"
        )));
    }
    let w = c / heads;
    let mut out = vec![0.0; b * heads * t];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let base = (bi * t + ti) * c + h * w;
                let sq: f64 = x.tensor().data()[base..base + w]
                    .iter()
                    .map(|v| v * v)
                    .sum();
                out[(bi * heads + h) * t + ti] = sq.sqrt();
            }
        }
    }
    Tensor::from_vec(vec![b, heads, t], out)
}

// ── Mixing-weight traces ────────────────────────────────────────────

/// One record of a mixing-weight trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub step: u64,
    pub layer: usize,
    pub head: usize,
    pub lambda_mean: f64,
    pub lambda_var: f64,
}

pub const LAMBDA_TRACE_HEADER: &str = "step,layer,head,lambda_mean,lambda_var";

/// Parse a trace in the exact format written by the trainer: a header
/// line, then one comma-separated record per line. Lines starting with
/// `#` are comments. Malformed lines are reported with their number.
pub fn parse_lambda_trace(text: &str) -> Result<Vec<LambdaRow>, CoreError> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != LAMBDA_TRACE_HEADER {
                return Err(CoreError::Parse {
                    line: lineno,
                    message: format!("expected header '{LAMBDA_TRACE_HEADER}', got '{line}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CoreError::Parse {
                line: lineno,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_int = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|e| CoreError::Parse {
                line: lineno,
                message: format!("bad {what} '{s}': {e}"),
            })
        };
        let parse_float = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|e| CoreError::Parse {
                    line: lineno,
                    message: format!("bad {what} '{s}': {e}"),
                })
                .and_then(|v| {
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(CoreError::Parse {
                            line: lineno,
                            message: format!("non-finite {what} '{s}'"),
                        })
                    }
                })
        };
        rows.push(LambdaRow {
            step: parse_int(fields[0], "step")?,
            layer: parse_int(fields[1], "layer")? as usize,
            head: parse_int(fields[2], "head")? as usize,
            lambda_mean: parse_float(fields[3], "lambda_mean")?,
            lambda_var: parse_float(fields[4], "lambda_var")?,
        });
    }
    if !saw_header {
        return Err(CoreError::Parse {
            line: 0,
            message: "empty trace: header line missing".into(),
        });
    }
    Ok(rows)
}

/// Start, end, and drift of the mixing weights for one (layer, head).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LambdaSummary {
    pub layer: usize,
    pub head: usize,
    pub start_mean: f64,
    pub end_mean: f64,
    pub start_var: f64,
    pub end_var: f64,
    pub drift_mean: f64,
    pub drift_var: f64,
}

/// Group trace rows by (layer, head), ordered, assuming rows appear in
/// step order within each group (as written by the trainer).
pub fn summarize_lambda(rows: &[LambdaRow]) -> Vec<LambdaSummary> {
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.layer, r.head)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(layer, head)| {
            let group: Vec<&LambdaRow> = rows
                .iter()
                .filter(|r| r.layer == layer && r.head == head)
                .collect();
            let first = group.first().unwrap();
            let last = group.last().unwrap();
            LambdaSummary {
                layer,
                head,
                start_mean: first.lambda_mean,
                end_mean: last.lambda_mean,
                start_var: first.lambda_var,
                end_var: last.lambda_var,
                drift_mean: last.lambda_mean - first.lambda_mean,
                drift_var: last.lambda_var - first.lambda_var,
            }
        })
        .collect()
}

// ── Heatmap export ──────────────────────────────────────────────────

/// Write a rank-2 tensor as an 8-bit ASCII PGM plus a `<path>.txt`
/// sidecar recording the value range mapped onto 0..255. A constant
/// matrix maps to all zeros.
pub fn write_pgm_heatmap(path: &Path, m: &Tensor) -> Result<(), CoreError> {
    let [rows, cols] = match m.shape() {
        [r, c] => [*r, *c],
        s => {
            return Err(CoreError::invalid(format!(
                "heatmap needs a rank-2 tensor, got {s:?}"
            )))
        }
    };
    if let Some((index, value)) = m.first_non_finite() {
        return Err(CoreError::NonFinite {
            context: "heatmap",
            index,
            value,
        });
    }
    let min = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut body = String::new();
    writeln!(body, "P2\n{cols} {rows}\n255").unwrap();
    for r in 0..rows {
        let line: Vec<String> = m.data()[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| {
                let level = if span > 0.0 {
                    ((v - min) / span * 255.0).round() as u32
                } else {
                    0
                };
                level.min(255).to_string()
            })
            .collect();
        writeln!(body, "{}", line.join(" ")).unwrap();
    }
    std::fs::write(path, body)?;
    let sidecar = format!(
        "rows={rows}\ncols={cols}\nmin={min}\nmax={max}\nlevels=256\nmapping=linear min->0 max->255\n"
    );
    let mut sidecar_path = path.as_os_str().to_owned();
    sidecar_path.push(".txt");
    std::fs::write(Path::new(&sidecar_path), sidecar)?;
    Ok(())
}
