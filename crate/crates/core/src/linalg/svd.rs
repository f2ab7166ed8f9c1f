use serde::{Deserialize, Serialize};

use super::{dot, Matrix};
use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `m ≈ u · diag(sigma) · vt` truncated at
/// `rcond · sigma[0]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvdResult {
    /// `rows × rank`, orthonormal columns.
    pub u: Matrix,
    /// Descending, all strictly above `rcond · sigma[0]`.
    pub sigma: Vec<f64>,
    /// `rank × cols`, orthonormal rows.
    pub vt: Matrix,
    pub rcond: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Reassembles `u · diag(sigma) · vt`, optionally keeping only the
    /// leading `rank` triplets.
    pub fn reconstruct(&self, rank: Option<usize>) -> Matrix {
        let r = rank.unwrap_or(self.rank()).min(self.rank());
        let keep: Vec<usize> = (0..r).collect();
        let mut us = self.u.select_cols(&keep);
        for i in 0..us.rows() {
            for (j, s) in self.sigma[..r].iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.vt.select_rows(&keep))
    }
}

/// Relative truncation tolerance used when callers do not choose one.
pub fn default_rcond(rows: usize, cols: usize) -> f64 {
    1e-10 * rows.max(cols) as f64
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Works on the orientation with at least as many rows as columns and
/// rotates column pairs until every pair is orthogonal to `1e-15` relative.
pub fn svd(m: &Matrix, rcond: f64) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::InvalidMatrix("empty matrix".into()));
    }
    m.ensure_finite("svd input")?;

    let transposed = m.rows() < m.cols();
    let work = if transposed { m.transpose() } else { m.clone() };
    let (p, q) = work.shape();

    // Column-major working copies: `cols[j]` is column j of the working matrix.
    let mut cols: Vec<Vec<f64>> = (0..q).map(|j| work.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1.0f64.hypot(zeta));
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let sigma_max = norms[order[0]];
    let threshold = rcond * sigma_max;
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&j| norms[j] > threshold && norms[j] > 0.0)
        .collect();
    let r = keep.len();

    let sigma: Vec<f64> = keep.iter().map(|&j| norms[j]).collect();
    // Left factor of the working matrix (p × r) and right factor (q × r).
    let left = Matrix::from_fn(p, r, |i, k| cols[keep[k]][i] / sigma[k]);
    let right = Matrix::from_fn(q, r, |i, k| v[keep[k]][i]);

    let (u, vt) = if transposed {
        (right, left.transpose())
    } else {
        (left, right.transpose())
    };
    Ok(SvdResult { u, sigma, vt, rcond })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let ci = &mut head[i];
    let cj = &mut tail[0];
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Moore-Penrose pseudoinverse `V · Σ⁻¹ · Uᵀ` (shape `cols × rows`).
pub fn pseudoinverse(w: &Matrix, rcond: f64) -> Result<Matrix> {
    let dec = svd(w, rcond)?;
    let mut scaled_vt = dec.vt.clone();
    for (k, s) in dec.sigma.iter().enumerate() {
        scaled_vt.row_mut(k).iter_mut().for_each(|x| *x /= s);
    }
    let mut out = Matrix::zeros(w.cols(), w.rows());
    super::gemm(1.0, &scaled_vt, true, &dec.u, true, 0.0, &mut out);
    Ok(out)
}
