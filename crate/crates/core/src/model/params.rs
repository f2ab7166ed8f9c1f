use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn default_ffn_mult() -> usize {
    2
}

/// Shape of a toy decoder-only language model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// Feed-forward width as a multiple of `hidden_dim`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

impl LmConfig {
    pub fn new(
        n_layers: usize,
        hidden_dim: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq: usize,
        seed: u64,
    ) -> Self {
        LmConfig {
            n_layers,
            hidden_dim,
            n_heads,
            vocab_size,
            max_seq,
            seed,
            ffn_mult: default_ffn_mult(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigError(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if self.max_seq == 0 || self.ffn_mult == 0 {
            return fail("max_seq and ffn_mult must be positive".into());
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim();
        let v = self.vocab_size;
        let block = 2 * d + 4 * d * d + 2 * d * f;
        v * d + self.max_seq * d + self.n_layers * block + d + d * v
    }
}

/// Names of the tensors inside one transformer block, in storage order.
pub const BLOCK_TENSORS: [&str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2"];

/// Weights of one pre-norm decoder block. Norm gains are stored as `1 × D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    /// `D × F`.
    pub w1: Matrix,
    /// `F × D`.
    pub w2: Matrix,
}

impl BlockParams {
    fn zeros(d: usize, f: usize) -> Self {
        BlockParams {
            attn_norm: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, f),
            w2: Matrix::zeros(f, d),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w1,
            &self.w2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w1,
            &mut self.w2,
        ]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        BLOCK_TENSORS.iter().position(|n| *n == name).map(|i| self.tensors()[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let i = BLOCK_TENSORS.iter().position(|n| *n == name)?;
        self.tensors_mut().into_iter().nth(i)
    }
}

/// All weights of a toy LM. The same structure doubles as the gradient
/// container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub config: LmConfig,
    /// `v × D`.
    pub tok_emb: Matrix,
    /// `max_seq × D`.
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Matrix,
    /// `D × v`; its pseudoinverse defines the output-side semantic bases.
    pub lm_head: Matrix,
}

pub fn block_tensor_name(layer: usize, tensor: &str) -> String {
    format!("blocks.{layer}.{tensor}")
}

impl LmParams {
    /// Seeded initialization.
    ///
    /// Projections reading the residual stream use `N(0, 1/D)`; projections
    /// writing back into it start small (`0.1/√fan_in`). The LM head is
    /// semi-orthogonal so its pseudoinverse rows start equal-norm and
    /// isotropic.
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let v = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let emb_std = 0.5 / (d as f64).sqrt();
        let read_std = 1.0 / (d as f64).sqrt();
        let tok_emb = Matrix::random_normal(&mut rng, v, d, emb_std);
        let pos_emb = Matrix::random_normal(&mut rng, config.max_seq, d, emb_std);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                attn_norm: Matrix::filled(1, d, 1.0),
                wq: Matrix::random_normal(&mut rng, d, d, read_std),
                wk: Matrix::random_normal(&mut rng, d, d, read_std),
                wv: Matrix::random_normal(&mut rng, d, d, read_std),
                wo: Matrix::random_normal(&mut rng, d, d, 0.1 / (d as f64).sqrt()),
                ffn_norm: Matrix::filled(1, d, 1.0),
                w1: Matrix::random_normal(&mut rng, d, f, read_std),
                w2: Matrix::random_normal(&mut rng, f, d, 0.1 / (f as f64).sqrt()),
            })
            .collect();
        let final_norm = Matrix::filled(1, d, 1.0);
        let lm_head = Matrix::random_semi_orthogonal(&mut rng, d, v);
        Ok(LmParams {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            lm_head,
        })
    }

    /// Same shapes as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let d = c.hidden_dim;
        LmParams {
            config: c.clone(),
            tok_emb: Matrix::zeros(c.vocab_size, d),
            pos_emb: Matrix::zeros(c.max_seq, d),
            blocks: (0..c.n_layers).map(|_| BlockParams::zeros(d, c.ffn_dim())).collect(),
            final_norm: Matrix::zeros(1, d),
            lm_head: Matrix::zeros(d, c.vocab_size),
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    /// Every tensor with its canonical name, in storage order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                out.push((block_tensor_name(l, name), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors_mut()) {
                out.push((block_tensor_name(l, name), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// SHA-256 over tensor names and the exact bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Names of tensors whose bits differ between `self` and `other`,
    /// with the count of differing entries.
    pub fn diff_census(&self, other: &LmParams) -> Vec<(String, usize)> {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .filter_map(|((name, a), (_, b))| {
                let changed = a
                    .as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .filter(|(x, y)| x.to_bits() != y.to_bits())
                    .count();
                (changed > 0).then_some((name, changed))
            })
            .collect()
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &LmParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(alpha);
        }
    }
}
