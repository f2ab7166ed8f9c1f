use serde::{Deserialize, Serialize};

use super::params::{BlockParams, LmParams};
use crate::data::TokenBatch;
use crate::error::Result;
use crate::linalg::Matrix;

pub(crate) const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Hidden states captured during one forward pass. Every matrix is
/// `tokens × width` with `tokens = batch × seq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Feed-forward output of each block, before it is added to the
    /// residual stream (the supervision interface).
    pub per_layer: Vec<Matrix>,
    /// Residual stream after each block.
    pub block_outputs: Vec<Matrix>,
    /// Final-norm output fed to the LM head.
    pub final_hidden: Matrix,
    /// `final_hidden · lm_head`.
    pub logits: Matrix,
}

impl LayerTrace {
    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }
}

pub(crate) struct BlockCache {
    pub x_in: Matrix,
    pub inv_rms1: Vec<f64>,
    pub n1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// One `seq × seq` causal probability matrix per (sequence, head).
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub x_mid: Matrix,
    pub inv_rms2: Vec<f64>,
    pub n2: Matrix,
    pub pre_act: Matrix,
    pub act: Matrix,
}

pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub x_final: Matrix,
    pub inv_rms_final: Vec<f64>,
}

pub(crate) fn gelu(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * u * (1.0 + th)
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Row-wise RMS normalization with a learned gain. Returns the output and
/// each row's `1/rms`.
pub(crate) fn rms_norm(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let g = gain.as_slice();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for ((o, &xv), &gv) in out.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = xv * r * gv;
        }
    }
    (out, inv)
}

fn attention(q: &Matrix, k: &Matrix, v: &Matrix, batch: usize, seq: usize, heads: usize) -> (Matrix, Vec<Matrix>) {
    let d = q.cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            let mut p = Matrix::zeros(seq, seq);
            for t in 0..seq {
                let qt = &q.row(b * seq + t)[off..off + hd];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=t {
                    let ks = &k.row(b * seq + s)[off..off + hd];
                    let score = crate::linalg::dot(qt, ks) * scale;
                    p[(t, s)] = score;
                    max = max.max(score);
                }
                let mut z = 0.0;
                for s in 0..=t {
                    let e = (p[(t, s)] - max).exp();
                    p[(t, s)] = e;
                    z += e;
                }
                let out = &mut ctx.row_mut(b * seq + t)[off..off + hd];
                for s in 0..=t {
                    let w = p[(t, s)] / z;
                    p[(t, s)] = w;
                    let vs = &v.row(b * seq + s)[off..off + hd];
                    for (o, x) in out.iter_mut().zip(vs) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
    }
    (ctx, probs)
}

fn block_forward(
    p: &BlockParams,
    x: Matrix,
    batch: &TokenBatch,
    heads: usize,
    offset: Option<&Matrix>,
) -> (Matrix, Matrix, BlockCache) {
    let (n1, inv_rms1) = rms_norm(&x, &p.attn_norm);
    let q = n1.matmul(&p.wq);
    let k = n1.matmul(&p.wk);
    let v = n1.matmul(&p.wv);
    let (ctx, probs) = attention(&q, &k, &v, batch.batch_size, batch.seq_len, heads);
    let mut x_mid = ctx.matmul(&p.wo);
    x_mid.axpy(1.0, &x);
    let (n2, inv_rms2) = rms_norm(&x_mid, &p.ffn_norm);
    let pre_act = n2.matmul(&p.w1);
    let mut act = pre_act.clone();
    act.as_mut_slice().iter_mut().for_each(|u| *u = gelu(*u));
    let mut ffn_out = act.matmul(&p.w2);
    if let Some(o) = offset {
        ffn_out.axpy(1.0, o);
    }
    let mut x_out = x_mid.clone();
    x_out.axpy(1.0, &ffn_out);
    let cache = BlockCache {
        x_in: x,
        inv_rms1,
        n1,
        q,
        k,
        v,
        probs,
        ctx,
        x_mid,
        inv_rms2,
        n2,
        pre_act,
        act,
    };
    (ffn_out, x_out, cache)
}

pub(crate) fn forward_cached(params: &LmParams, batch: &TokenBatch) -> Result<(LayerTrace, ForwardCache)> {
    forward_impl(params, batch, &[])
}

fn forward_impl(
    params: &LmParams,
    batch: &TokenBatch,
    offsets: &[Option<Matrix>],
) -> Result<(LayerTrace, ForwardCache)> {
    let cfg = &params.config;
    batch.validate(cfg.vocab_size, cfg.max_seq)?;
    let d = cfg.hidden_dim;
    let n = batch.n_tokens();
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let t = i % batch.seq_len;
        let row = x.row_mut(i);
        for ((o, e), p) in row
            .iter_mut()
            .zip(params.tok_emb.row(batch.input_ids[i]))
            .zip(params.pos_emb.row(t))
        {
            *o = e + p;
        }
    }
    let mut per_layer = Vec::with_capacity(cfg.n_layers);
    let mut block_outputs = Vec::with_capacity(cfg.n_layers);
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (l, block) in params.blocks.iter().enumerate() {
        let offset = offsets.get(l).and_then(Option::as_ref);
        if let Some(o) = offset {
            if o.shape() != (n, d) {
                return Err(crate::Error::shape(format!("offset for block {l} is {:?}", o.shape())));
            }
        }
        let (ffn_out, x_out, cache) = block_forward(block, x, batch, cfg.n_heads, offset);
        per_layer.push(ffn_out);
        block_outputs.push(x_out.clone());
        caches.push(cache);
        x = x_out;
    }
    let (final_hidden, inv_rms_final) = rms_norm(&x, &params.final_norm);
    let logits = final_hidden.matmul(&params.lm_head);
    Ok((
        LayerTrace {
            per_layer,
            block_outputs,
            final_hidden,
            logits,
        },
        ForwardCache {
            blocks: caches,
            x_final: x,
            inv_rms_final,
        },
    ))
}

/// Runs the model on `batch`, capturing every block's feed-forward output
/// before the residual addition.
pub fn forward_with_trace(params: &LmParams, batch: &TokenBatch) -> Result<LayerTrace> {
    forward_cached(params, batch).map(|(trace, _)| trace)
}

/// Forward pass with `offsets[l]` added to block `l`'s feed-forward output
/// before the residual addition. Used to probe the model at the
/// supervision interface.
pub fn forward_with_offsets(params: &LmParams, batch: &TokenBatch, offsets: &[Option<Matrix>]) -> Result<LayerTrace> {
    forward_impl(params, batch, offsets).map(|(trace, _)| trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::model::LmConfig;

    fn batch() -> TokenBatch {
        TokenBatch::from_examples(&[
            Example {
                tokens: vec![0, 3, 4, 1, 3, 4],
                answer_start: 4,
            },
            Example {
                tokens: vec![0, 5, 2, 1, 5, 2],
                answer_start: 4,
            },
        ])
        .unwrap()
    }

    #[test]
    fn trace_shapes_follow_config() {
        let cfg = LmConfig::new(3, 8, 2, 6, 8, 1);
        let p = LmParams::init(&cfg).unwrap();
        let tr = forward_with_trace(&p, &batch()).unwrap();
        assert_eq!(tr.per_layer.len(), 3);
        assert_eq!(tr.per_layer[0].shape(), (10, 8));
        assert_eq!(tr.logits.shape(), (10, 6));
        let relogits = tr.final_hidden.matmul(&p.lm_head);
        assert_eq!(relogits, tr.logits);
    }

    #[test]
    fn zero_ffn_weights_give_zero_trace() {
        let cfg = LmConfig::new(2, 8, 2, 6, 8, 2);
        let mut p = LmParams::init(&cfg).unwrap();
        p.blocks[1].w2.fill(0.0);
        let tr = forward_with_trace(&p, &batch()).unwrap();
        assert!(tr.per_layer[1].as_slice().iter().all(|&v| v == 0.0));
        assert!(tr.per_layer[0].max_abs() > 0.0);
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        let cfg = LmConfig::new(2, 8, 2, 6, 8, 3);
        let p = LmParams::init(&cfg).unwrap();
        assert_eq!(
            forward_with_trace(&p, &batch()).unwrap(),
            forward_with_trace(&p, &batch()).unwrap()
        );
    }

    #[test]
    fn trace_is_a_snapshot() {
        let cfg = LmConfig::new(2, 8, 2, 6, 8, 4);
        let mut p = LmParams::init(&cfg).unwrap();
        let tr = forward_with_trace(&p, &batch()).unwrap();
        let held = tr.clone();
        p.blocks[0].w2.scale(3.0);
        p.lm_head.fill(0.0);
        assert_eq!(tr, held);
    }

    #[test]
    fn out_of_vocab_input_is_rejected() {
        let cfg = LmConfig::new(1, 8, 2, 4, 8, 1);
        let p = LmParams::init(&cfg).unwrap();
        assert!(matches!(
            forward_with_trace(&p, &batch()),
            Err(crate::Error::TokenRangeError { .. })
        ));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn tiny_model_matches_scalar_oracle() {
        let cfg = LmConfig::new(1, 4, 1, 5, 2, 17);
        let p = LmParams::init(&cfg).unwrap();
        let b = TokenBatch::new(1, 2, vec![3, 1], vec![1, 2], vec![true, true]).unwrap();
        let tr = forward_with_trace(&p, &b).unwrap();

        let d = 4;
        let f = cfg.ffn_dim();
        let blk = &p.blocks[0];
        let norm = |x: &[f64], g: &Matrix| -> Vec<f64> {
            let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
            (0..d).map(|j| x[j] / (ms + 1e-6).sqrt() * g[(0, j)]).collect()
        };
        let mul = |x: &[f64], w: &Matrix, n: usize| -> Vec<f64> {
            (0..n).map(|j| (0..x.len()).map(|i| x[i] * w[(i, j)]).sum()).collect()
        };
        let xs: Vec<Vec<f64>> = (0..2)
            .map(|t| {
                (0..d)
                    .map(|j| p.tok_emb[(b.input_ids[t], j)] + p.pos_emb[(t, j)])
                    .collect()
            })
            .collect();
        let n1: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, &blk.attn_norm)).collect();
        let q: Vec<Vec<f64>> = n1.iter().map(|x| mul(x, &blk.wq, d)).collect();
        let k: Vec<Vec<f64>> = n1.iter().map(|x| mul(x, &blk.wk, d)).collect();
        let v: Vec<Vec<f64>> = n1.iter().map(|x| mul(x, &blk.wv, d)).collect();
        for t in 0..2 {
            let scores: Vec<f64> = (0..=t)
                .map(|s| (0..d).map(|j| q[t][j] * k[s][j]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let ctx: Vec<f64> = (0..d)
                .map(|j| (0..=t).map(|s| scores[s].exp() / z * v[s][j]).sum())
                .collect();
            let attn = mul(&ctx, &blk.wo, d);
            let mid: Vec<f64> = (0..d).map(|j| xs[t][j] + attn[j]).collect();
            let n2 = norm(&mid, &blk.ffn_norm);
            let hid: Vec<f64> = mul(&n2, &blk.w1, f).into_iter().map(gelu).collect();
            let ffn = mul(&hid, &blk.w2, d);
            let out: Vec<f64> = (0..d).map(|j| mid[j] + ffn[j]).collect();
            let fin = norm(&out, &p.final_norm);
            let logits = mul(&fin, &p.lm_head, 5);
            for j in 0..5 {
                assert!((logits[j] - tr.logits[(t, j)]).abs() < 1e-10);
            }
            for j in 0..d {
                assert!((ffn[j] - tr.per_layer[0][(t, j)]).abs() < 1e-10);
            }
        }
    }
}
