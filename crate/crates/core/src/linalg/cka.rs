use super::Matrix;
use crate::error::{Error, Result};

fn center_columns(m: &Matrix) -> Matrix {
    let n = m.rows() as f64;
    let mut means = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (mu, x) in means.iter_mut().zip(m.row(i)) {
            *mu += x;
        }
    }
    means.iter_mut().for_each(|mu| *mu /= n);
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (x, mu) in out.row_mut(i).iter_mut().zip(&means) {
            *x -= mu;
        }
    }
    out
}

/// Linear centered kernel alignment between two representations of the
/// same samples (rows). Feature counts may differ.
///
/// `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F · ‖Ycᵀ Yc‖_F)` on column-centered inputs.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "CKA inputs have {} and {} samples",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::DegenerateInput(format!(
            "CKA needs at least 2 samples, got {}",
            x.rows()
        )));
    }
    x.ensure_finite("CKA input")?;
    y.ensure_finite("CKA input")?;
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xx = xc.matmul_tn(&xc).frobenius_norm();
    let yy = yc.matmul_tn(&yc).frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::DegenerateInput("zero-variance representation".into()));
    }
    let yx = yc.matmul_tn(&xc).frobenius_norm();
    Ok((yx * yx / (xx * yy)).clamp(0.0, 1.0))
}
