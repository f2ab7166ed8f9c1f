use super::forward::{forward_cached, gelu_grad, BlockCache, ForwardCache, LayerTrace};
use super::loss::{Objective, TraceGrad};
use super::params::{BlockParams, LmParams};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Same layout as the model's parameters.
    pub params: LmParams,
    /// `∂loss/∂per_layer[l]` for every block.
    pub activations: Vec<Matrix>,
    pub trace: LayerTrace,
}

fn rms_norm_backward(dy: &Matrix, x: &Matrix, inv: &[f64], gain: &Matrix, dgain: &mut Matrix) -> Matrix {
    let d = x.cols();
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let r = inv[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut m = 0.0;
        for j in 0..d {
            let xhat = xr[j] * r;
            dgain.as_mut_slice()[j] += dyr[j] * xhat;
            m += dyr[j] * g[j] * xhat;
        }
        m /= d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = (dyr[j] * g[j] - xr[j] * r * m) * r;
        }
    }
    dx
}

fn attention_backward(
    c: &BlockCache,
    dctx: &Matrix,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let d = c.q.cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(c.q.rows(), d);
    let mut dk = Matrix::zeros(c.k.rows(), d);
    let mut dv = Matrix::zeros(c.v.rows(), d);
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            let p = &c.probs[b * heads + h];
            for t in 0..seq {
                let rt = b * seq + t;
                let go = &dctx.row(rt)[off..off + hd];
                let mut acc = 0.0;
                for s in 0..=t {
                    let rs = b * seq + s;
                    let w = p[(t, s)];
                    dp[s] = crate::linalg::dot(go, &c.v.row(rs)[off..off + hd]);
                    acc += dp[s] * w;
                    for (o, g) in dv.row_mut(rs)[off..off + hd].iter_mut().zip(go) {
                        *o += w * g;
                    }
                }
                for s in 0..=t {
                    let rs = b * seq + s;
                    let ds = p[(t, s)] * (dp[s] - acc) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ks = &c.k.row(rs)[off..off + hd];
                    for (o, kv) in dq.row_mut(rt)[off..off + hd].iter_mut().zip(ks) {
                        *o += ds * kv;
                    }
                    let qt = &c.q.row(rt)[off..off + hd];
                    for (o, qv) in dk.row_mut(rs)[off..off + hd].iter_mut().zip(qt) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Backpropagates through one block given the gradient on its residual
/// output and on its feed-forward output. Returns the gradient on the block
/// input and the total gradient on the feed-forward output.
fn block_backward(
    p: &BlockParams,
    c: &BlockCache,
    g: &mut BlockParams,
    dx_out: Matrix,
    ffn_seed: Option<&Matrix>,
    batch: &TokenBatch,
    heads: usize,
) -> (Matrix, Matrix) {
    let mut df = dx_out.clone();
    if let Some(s) = ffn_seed {
        df.axpy(1.0, s);
    }
    gemm(1.0, &c.act, true, &df, false, 1.0, &mut g.w2);
    let mut dpre = df.matmul_nt(&p.w2);
    for (d, &u) in dpre.as_mut_slice().iter_mut().zip(c.pre_act.as_slice()) {
        *d *= gelu_grad(u);
    }
    gemm(1.0, &c.n2, true, &dpre, false, 1.0, &mut g.w1);
    let dn2 = dpre.matmul_nt(&p.w1);
    let mut dx_mid = rms_norm_backward(&dn2, &c.x_mid, &c.inv_rms2, &p.ffn_norm, &mut g.ffn_norm);
    dx_mid.axpy(1.0, &dx_out);

    gemm(1.0, &c.ctx, true, &dx_mid, false, 1.0, &mut g.wo);
    let dctx = dx_mid.matmul_nt(&p.wo);
    let (dq, dk, dv) = attention_backward(c, &dctx, batch.batch_size, batch.seq_len, heads);
    gemm(1.0, &c.n1, true, &dq, false, 1.0, &mut g.wq);
    gemm(1.0, &c.n1, true, &dk, false, 1.0, &mut g.wk);
    gemm(1.0, &c.n1, true, &dv, false, 1.0, &mut g.wv);
    let mut dn1 = dq.matmul_nt(&p.wq);
    gemm(1.0, &dk, false, &p.wk, true, 1.0, &mut dn1);
    gemm(1.0, &dv, false, &p.wv, true, 1.0, &mut dn1);
    let mut dx_in = rms_norm_backward(&dn1, &c.x_in, &c.inv_rms1, &p.attn_norm, &mut g.attn_norm);
    dx_in.axpy(1.0, &dx_mid);
    (dx_in, df)
}

fn check_seed(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::shape(format!(
            "{what} gradient is {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        )));
    }
    Ok(())
}

pub(crate) fn backward_from_cache(
    params: &LmParams,
    batch: &TokenBatch,
    trace: LayerTrace,
    cache: ForwardCache,
    seed: &TraceGrad,
) -> Result<(LmParams, Vec<Matrix>, LayerTrace)> {
    let cfg = &params.config;
    let n = batch.n_tokens();
    let d = cfg.hidden_dim;
    let l = cfg.n_layers;
    for (i, m) in seed.per_layer.iter().chain(&seed.block_outputs).enumerate() {
        if let Some(m) = m {
            check_seed(m, n, d, &format!("trace entry {i}"))?;
        }
    }
    if seed.per_layer.len() > l || seed.block_outputs.len() > l {
        return Err(Error::shape("trace gradient has more layers than the model"));
    }
    let mut grads = params.zeros_like();

    let mut dfh = Matrix::zeros(n, d);
    if let Some(gl) = &seed.logits {
        check_seed(gl, n, cfg.vocab_size, "logit")?;
        gemm(1.0, &trace.final_hidden, true, gl, false, 1.0, &mut grads.lm_head);
        gemm(1.0, gl, false, &params.lm_head, true, 1.0, &mut dfh);
    }
    if let Some(gf) = &seed.final_hidden {
        check_seed(gf, n, d, "final hidden")?;
        dfh.axpy(1.0, gf);
    }
    let mut dx = rms_norm_backward(
        &dfh,
        &cache.x_final,
        &cache.inv_rms_final,
        &params.final_norm,
        &mut grads.final_norm,
    );
    let mut act_grads = vec![Matrix::zeros(0, 0); l];
    for k in (0..l).rev() {
        if let Some(Some(s)) = seed.block_outputs.get(k) {
            dx.axpy(1.0, s);
        }
        let ffn_seed = seed.per_layer.get(k).and_then(|s| s.as_ref());
        let (dx_in, df) = block_backward(
            &params.blocks[k],
            &cache.blocks[k],
            &mut grads.blocks[k],
            dx,
            ffn_seed,
            batch,
            cfg.n_heads,
        );
        act_grads[k] = df;
        dx = dx_in;
    }
    for i in 0..n {
        let t = i % batch.seq_len;
        let gr = dx.row(i);
        for (o, g) in grads.tok_emb.row_mut(batch.input_ids[i]).iter_mut().zip(gr) {
            *o += g;
        }
        for (o, g) in grads.pos_emb.row_mut(t).iter_mut().zip(gr) {
            *o += g;
        }
    }
    Ok((grads, act_grads, trace))
}

/// Forward pass, objective evaluation and full backpropagation.
pub fn backward(params: &LmParams, batch: &TokenBatch, objective: &dyn Objective) -> Result<Gradients> {
    backward_with(params, batch, |trace, batch| objective.evaluate(trace, batch))
}

/// Like [`backward`] with the objective given as a closure.
pub fn backward_with<F>(params: &LmParams, batch: &TokenBatch, objective: F) -> Result<Gradients>
where
    F: FnOnce(&LayerTrace, &TokenBatch) -> Result<(f64, TraceGrad)>,
{
    let (trace, cache) = forward_cached(params, batch)?;
    let (loss, seed) = objective(&trace, batch)?;
    if !loss.is_finite() {
        return Err(Error::NumericalError(format!("non-finite loss {loss}")));
    }
    let (grads, activations, trace) = backward_from_cache(params, batch, trace, cache, &seed)?;
    Ok(Gradients {
        loss,
        params: grads,
        activations,
        trace,
    })
}
