use super::forward::LayerTrace;
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Gradient of a scalar objective with respect to traced values. `None`
/// entries contribute nothing.
#[derive(Clone, Debug, Default)]
pub struct TraceGrad {
    pub per_layer: Vec<Option<Matrix>>,
    pub block_outputs: Vec<Option<Matrix>>,
    pub final_hidden: Option<Matrix>,
    pub logits: Option<Matrix>,
}

impl TraceGrad {
    pub fn empty(n_layers: usize) -> Self {
        TraceGrad {
            per_layer: vec![None; n_layers],
            block_outputs: vec![None; n_layers],
            final_hidden: None,
            logits: None,
        }
    }

    pub fn scale(&mut self, c: f64) {
        let all = self
            .per_layer
            .iter_mut()
            .chain(self.block_outputs.iter_mut())
            .chain(std::iter::once(&mut self.final_hidden))
            .chain(std::iter::once(&mut self.logits));
        for m in all.flatten() {
            m.scale(c);
        }
    }
}

/// A scalar loss over a [`LayerTrace`], with its gradient on the traced
/// values. Backpropagation through the model is handled by
/// [`backward`](super::backward).
pub trait Objective {
    fn evaluate(&self, trace: &LayerTrace, batch: &TokenBatch) -> Result<(f64, TraceGrad)>;
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean token cross-entropy over supervised positions, and its gradient
/// with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Matrix, batch: &TokenBatch) -> Result<(f64, Matrix)> {
    let rows = batch.supervised_rows();
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = rows.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for &i in &rows {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let y = batch.target_ids[i];
        loss += lse - row[y];
        for (g, &z) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (z - lse).exp() / n;
        }
        grad[(i, y)] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Mean cross-entropy of the trace's logits over the supervised positions.
pub fn lm_loss(trace: &LayerTrace, batch: &TokenBatch) -> Result<f64> {
    cross_entropy_with_grad(&trace.logits, batch).map(|(l, _)| l)
}

/// Standard next-token cross-entropy.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn evaluate(&self, trace: &LayerTrace, batch: &TokenBatch) -> Result<(f64, TraceGrad)> {
        let (loss, g) = cross_entropy_with_grad(&trace.logits, batch)?;
        let mut tg = TraceGrad::empty(trace.n_layers());
        tg.logits = Some(g);
        Ok((loss, tg))
    }
}

/// `factor · inner`.
pub struct Scaled<'a> {
    pub inner: &'a dyn Objective,
    pub factor: f64,
}

impl Objective for Scaled<'_> {
    fn evaluate(&self, trace: &LayerTrace, batch: &TokenBatch) -> Result<(f64, TraceGrad)> {
        let (l, mut g) = self.inner.evaluate(trace, batch)?;
        g.scale(self.factor);
        Ok((l * self.factor, g))
    }
}
