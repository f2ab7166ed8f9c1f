//! Layer-by-layer CKA grids and plot-ready report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Example, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::{linear_cka, Matrix};
use crate::model::{forward_with_trace, LayerTrace, LmParams};
pub use crate::semantics::ValidationCurve;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaGrid {
    pub row_model: String,
    pub col_model: String,
    /// e.g. `"before"` / `"after"`.
    pub condition: String,
    /// `L_A × L_B`; entry `(i, j)` compares layer `i+1` of A with layer
    /// `j+1` of B.
    pub values: Matrix,
}

impl CkaGrid {
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Column of the largest value in each row, ties to the lower index.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.values.rows())
            .map(|i| {
                let row = self.values.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }

    /// Fraction of consecutive rows whose argmax column does not move
    /// backwards. A single-row grid scores 1.
    pub fn monotone_fraction(&self) -> f64 {
        let am = self.row_argmax();
        if am.len() < 2 {
            return 1.0;
        }
        let ok = am.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / (am.len() - 1) as f64
    }

    pub fn transpose(&self) -> CkaGrid {
        CkaGrid {
            row_model: self.col_model.clone(),
            col_model: self.row_model.clone(),
            condition: self.condition.clone(),
            values: self.values.transpose(),
        }
    }
}

/// Forward `model` over `data` in chunks of equal-length examples.
pub fn trace_dataset(model: &LmParams, data: &[Example], chunk: usize) -> Result<Vec<LayerTrace>> {
    let mut out = Vec::new();
    for group in data.chunk_by(|a, b| a.input_len() == b.input_len()) {
        for part in group.chunks(chunk.max(1)) {
            out.push(forward_with_trace(model, &TokenBatch::from_examples(part)?)?);
        }
    }
    Ok(out)
}

/// Token rows of every trace stacked, per layer, from `block_outputs`.
pub fn pooled_block_outputs(traces: &[LayerTrace]) -> Result<Vec<Matrix>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::DegenerateInput("no traces".into()))?;
    (0..first.n_layers())
        .map(|l| {
            let parts: Vec<&Matrix> = traces.iter().map(|t| &t.block_outputs[l]).collect();
            Matrix::vstack(&parts)
        })
        .collect()
}

/// `linear_cka` for every pair of layers. Inputs are `tokens × D` per
/// layer; both sides must cover the same tokens in the same order.
pub fn cka_grid_from_layers(a: &[Matrix], b: &[Matrix]) -> Result<Matrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateInput("no layers to compare".into()));
    }
    let n = a[0].rows();
    if let Some(m) = a.iter().chain(b).find(|m| m.rows() != n) {
        return Err(Error::AlignmentError(format!("{} token rows against {n}", m.rows())));
    }
    let mut values = Matrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            values.row_mut(i)[j] = linear_cka(x, y)?;
        }
    }
    Ok(values)
}

/// CKA grid between the block outputs of two sets of traces.
pub fn cka_grid(
    trace_a: &[LayerTrace],
    trace_b: &[LayerTrace],
    labels: (&str, &str),
    condition: &str,
) -> Result<CkaGrid> {
    Ok(CkaGrid {
        row_model: labels.0.into(),
        col_model: labels.1.into(),
        condition: condition.into(),
        values: cka_grid_from_layers(&pooled_block_outputs(trace_a)?, &pooled_block_outputs(trace_b)?)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// `after − before`.
    pub diff: Matrix,
    pub max_abs: f64,
    pub frobenius: f64,
}

pub fn compare_grids(before: &CkaGrid, after: &CkaGrid) -> Result<DeltaReport> {
    if before.shape() != after.shape() {
        return Err(Error::shape(format!(
            "grids {:?} and {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let diff = after.values.sub(&before.values);
    Ok(DeltaReport {
        max_abs: diff.max_abs(),
        frobenius: diff.frobenius_norm(),
        diff,
    })
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn grid_csv(grid: &CkaGrid) -> Result<String> {
    let (r, c) = grid.shape();
    if r == 0 || c == 0 {
        return Err(Error::DegenerateInput("empty CKA grid".into()));
    }
    let mut s = String::from("row_layer,col_layer,value\n");
    for i in 0..r {
        for j in 0..c {
            writeln!(s, "{},{},{}", i + 1, j + 1, fmt_value(grid.values[(i, j)])).expect("string write");
        }
    }
    Ok(s)
}

pub fn curve_csv(curve: &ValidationCurve) -> Result<String> {
    if curve.layers.is_empty() || curve.curves.is_empty() {
        return Err(Error::DegenerateInput("empty validation curve".into()));
    }
    let mut s = String::from("layer,side,value\n");
    for (side, values) in &curve.curves {
        for (l, v) in curve.layers.iter().zip(values) {
            writeln!(s, "{l},{side},{}", fmt_value(*v)).expect("string write");
        }
    }
    Ok(s)
}

/// Parses a file written by [`grid_csv`] back into a matrix.
pub fn parse_grid_csv(text: &str) -> Result<Matrix> {
    let bad = |m: String| Error::InvalidMatrix(format!("grid csv: {m}"));
    let mut cells = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(format!("line {} has {} fields", n + 1, f.len())));
        }
        let i: usize = f[0].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        let j: usize = f[1].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        let v: f64 = f[2].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        cells.push((i, j, v));
    }
    let rows = cells.iter().map(|c| c.0).max().ok_or_else(|| bad("no cells".into()))?;
    let cols = cells.iter().map(|c| c.1).max().unwrap_or(0);
    let mut m = Matrix::zeros(rows, cols);
    for (i, j, v) in cells {
        if i == 0 || j == 0 {
            return Err(bad("layers are 1-based".into()));
        }
        m.row_mut(i - 1)[j - 1] = v;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub name: String,
    pub file: String,
    pub sha256: String,
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub files: Vec<ReportFile>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl ReportManifest {
    /// SHA-256 of the manifest's canonical JSON.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }
}

fn write_file(dir: &Path, file: &str, text: &str) -> Result<String> {
    let path = dir.join(file);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Writes `<name>.csv` for every grid and curve plus `report.json`.
/// Identical inputs give identical bytes.
pub fn emit_report(
    dir: &Path,
    grids: &[(&str, &CkaGrid)],
    curves: &[(&str, &ValidationCurve)],
    metadata: serde_json::Value,
) -> Result<ReportManifest> {
    if grids.is_empty() && curves.is_empty() {
        return Err(Error::DegenerateInput("nothing to report".into()));
    }
    let grid_text: Vec<String> = grids.iter().map(|(_, g)| grid_csv(g)).collect::<Result<_>>()?;
    let curve_text: Vec<String> = curves.iter().map(|(_, c)| curve_csv(c)).collect::<Result<_>>()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for ((name, g), text) in grids.iter().zip(&grid_text) {
        let file = format!("{name}.csv");
        let sha256 = write_file(dir, &file, text)?;
        files.push(ReportFile {
            name: name.to_string(),
            file,
            sha256,
            summary: serde_json::json!({
                "kind": "cka_grid",
                "rows": g.shape().0,
                "cols": g.shape().1,
                "row_model": g.row_model,
                "col_model": g.col_model,
                "condition": g.condition,
                "monotone_fraction": g.monotone_fraction(),
            }),
        });
    }
    for ((name, c), text) in curves.iter().zip(&curve_text) {
        let file = format!("{name}.csv");
        let sha256 = write_file(dir, &file, text)?;
        let means: serde_json::Map<String, serde_json::Value> = c
            .curves
            .iter()
            .map(|(side, v)| {
                (
                    side.to_string(),
                    serde_json::json!(v.iter().sum::<f64>() / v.len().max(1) as f64),
                )
            })
            .collect();
        files.push(ReportFile {
            name: name.to_string(),
            file,
            sha256,
            summary: serde_json::json!({
                "kind": "validation_curve",
                "model_id": c.model_id,
                "dataset_id": c.dataset_id,
                "mean_by_side": means,
            }),
        });
    }
    let manifest = ReportManifest { files, metadata };
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
