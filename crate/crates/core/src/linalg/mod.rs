//! Dense linear algebra: the [`Matrix`] carrier, vector geometry, a one-sided
//! Jacobi SVD with Moore-Penrose pseudoinverse, and linear CKA.

mod cka;
mod matrix;
mod svd;

pub use cka::linear_cka;
pub use matrix::{gemm, orthonormalize_columns, Matrix};
pub use svd::{default_rcond, pseudoinverse, svd, SvdResult};

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_same_len(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "vector lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(())
}

/// Cosine similarity `⟨u,v⟩ / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_same_len(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Orthogonal projection of `r` onto the line spanned by `s`.
pub fn project(r: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    check_same_len(r, s)?;
    let ss = dot(s, s);
    if ss == 0.0 {
        return Err(Error::ZeroVector);
    }
    let c = dot(r, s) / ss;
    Ok(s.iter().map(|x| c * x).collect())
}

/// Returns `v / ‖v‖`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}
