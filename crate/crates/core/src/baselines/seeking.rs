use serde::{Deserialize, Serialize};

use crate::adapter::{train_adapters, Adapter, AdapterSet};
use crate::data::{Example, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::model::{backward, block_tensor_name, CrossEntropy, LmParams, Objective, TrainConfig};
use crate::transfer::TransferResult;

/// Block matrices that are scored, extracted and adapted.
pub const SCORED_TENSORS: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    /// 1-based.
    pub layer_index: usize,
    pub score: f64,
    /// `(tensor, per-entry score)` in [`SCORED_TENSORS`] order.
    pub matrices: Vec<(String, Matrix)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub layers: Vec<LayerSensitivity>,
    pub seed_set_size: usize,
}

impl SensitivityMap {
    pub fn matrix(&self, layer_index: usize, tensor: &str) -> Option<&Matrix> {
        let l = self.layers.get(layer_index.checked_sub(1)?)?;
        l.matrices.iter().find(|(n, _)| n == tensor).map(|(_, m)| m)
    }
}

/// `acc += |θ ⊙ ∇θ|`.
pub fn accumulate_sensitivity(acc: &mut Matrix, theta: &Matrix, grad: &Matrix) -> Result<()> {
    if acc.shape() != theta.shape() || theta.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "{:?}, {:?}, {:?}",
            acc.shape(),
            theta.shape(),
            grad.shape()
        )));
    }
    for ((s, &t), &g) in acc.as_mut_slice().iter_mut().zip(theta.as_slice()).zip(grad.as_slice()) {
        *s += (t * g).abs();
    }
    Ok(())
}

/// First-order sensitivity `Σ_j |θᵢ · ∂ℒ_j/∂θᵢ|` over the seed examples,
/// one example at a time.
pub fn seeking_sensitivity(teacher: &LmParams, seed_set: &[Example]) -> Result<SensitivityMap> {
    if seed_set.is_empty() {
        return Err(Error::DegenerateInput("seed set is empty".into()));
    }
    let mut layers: Vec<LayerSensitivity> = (0..teacher.config.n_layers)
        .map(|l| LayerSensitivity {
            layer_index: l + 1,
            score: 0.0,
            matrices: SCORED_TENSORS
                .iter()
                .map(|t| {
                    let (r, c) = teacher.tensor(&block_tensor_name(l, t)).expect("block tensor").shape();
                    (t.to_string(), Matrix::zeros(r, c))
                })
                .collect(),
        })
        .collect();
    for (j, ex) in seed_set.iter().enumerate() {
        let batch = TokenBatch::from_examples([ex])?;
        let g = backward(teacher, &batch, &CrossEntropy)?;
        for layer in &mut layers {
            for (t, acc) in &mut layer.matrices {
                let name = block_tensor_name(layer.layer_index - 1, t);
                let grad = g.params.tensor(&name).expect("block tensor");
                if !grad.is_finite() {
                    return Err(Error::NumericalError(format!(
                        "non-finite gradient for {name} on seed example {j}"
                    )));
                }
                accumulate_sensitivity(acc, teacher.tensor(&name).expect("block tensor"), grad)?;
            }
        }
    }
    for layer in &mut layers {
        layer.score = layer
            .matrices
            .iter()
            .map(|(_, m)| m.as_slice().iter().sum::<f64>())
            .sum();
    }
    Ok(SensitivityMap {
        layers,
        seed_set_size: seed_set.len(),
    })
}

/// The `count` highest-scoring layers, returned in depth order.
pub fn select_layers(map: &SensitivityMap, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > map.layers.len() {
        return Err(Error::RangeError(format!(
            "cannot select {count} of {} layers",
            map.layers.len()
        )));
    }
    let mut order: Vec<&LayerSensitivity> = map.layers.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer_index.cmp(&b.layer_index)));
    let mut picked: Vec<usize> = order[..count].iter().map(|l| l.layer_index).collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedBlock {
    pub source_layer: usize,
    pub row_indices: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub block: Matrix,
    pub cumulative_score: f64,
}

/// Indices of the `n` largest values, ties to the lower index, returned
/// ascending.
fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Greedy rows-then-columns: the `n_s` rows with the largest score sums,
/// then the `m_s` columns with the largest sums over those rows.
pub fn seeking_extract(w: &Matrix, scores: &Matrix, n_s: usize, m_s: usize) -> Result<ExtractedBlock> {
    if w.shape() != scores.shape() {
        return Err(Error::shape(format!(
            "weights {:?}, scores {:?}",
            w.shape(),
            scores.shape()
        )));
    }
    if n_s == 0 || m_s == 0 || n_s > w.rows() || m_s > w.cols() {
        return Err(Error::RangeError(format!(
            "block {n_s}×{m_s} does not fit in {:?}",
            w.shape()
        )));
    }
    let row_sums: Vec<f64> = (0..w.rows()).map(|i| scores.row(i).iter().sum()).collect();
    let rows = top_indices(&row_sums, n_s);
    let col_sums: Vec<f64> = (0..w.cols())
        .map(|j| rows.iter().map(|&i| scores[(i, j)]).sum())
        .collect();
    let cols = top_indices(&col_sums, m_s);
    let cumulative_score = cols.iter().map(|&j| col_sums[j]).sum();
    Ok(ExtractedBlock {
        source_layer: 0,
        block: w.select_rows(&rows).select_cols(&cols),
        row_indices: rows,
        col_indices: cols,
        cumulative_score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    /// `n_s × r`.
    pub b: Matrix,
    /// `r × m_s`.
    pub a: Matrix,
    pub rank: usize,
}

impl LoraPair {
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a)
    }
}

/// `B = U_r Σ_r`, `A = V_rᵀ`: the rank-`r` truncated SVD of the block.
/// Ranks above the block's dimensions are clamped.
pub fn seeking_lora_init(block: &ExtractedBlock, r: usize) -> Result<LoraPair> {
    if r == 0 {
        return Err(Error::RangeError("adapter rank must be at least 1".into()));
    }
    let (n, m) = block.block.shape();
    let rank = r.min(n).min(m);
    if rank < r {
        log::info!("adapter rank {r} clamped to {rank} for a {n}×{m} block");
    }
    let dec = svd(&block.block, 0.0)?;
    let kept = dec.sigma.len().min(rank);
    let b = Matrix::from_fn(
        n,
        rank,
        |i, k| if k < kept { dec.u[(i, k)] * dec.sigma[k] } else { 0.0 },
    );
    let a = Matrix::from_fn(rank, m, |k, j| if k < kept { dec.vt[(k, j)] } else { 0.0 });
    Ok(LoraPair { b, a, rank })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeekingConfig {
    pub seed_size: usize,
    pub rank: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SeekingConfig {
    fn default() -> Self {
        SeekingConfig {
            seed_size: 16,
            rank: 16,
            steps: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

pub struct SeekingOutcome {
    /// Student with the trained adapters merged in.
    pub model: LmParams,
    pub adapters: AdapterSet,
    /// Adapters as initialized, before fine-tuning.
    pub initial_adapters: AdapterSet,
    pub selected_layers: Vec<usize>,
    pub blocks: Vec<ExtractedBlock>,
    pub result: TransferResult,
}

/// Scores the teacher on the first `seed_size` examples, extracts
/// student-shaped blocks from the top `L_s` layers (kept in depth order),
/// initializes adapters on the matching student matrices from their SVD,
/// and fine-tunes only the adapters on `train_set`.
pub fn seeking_transfer(
    teacher: &LmParams,
    student: &LmParams,
    train_set: &[Example],
    config: &SeekingConfig,
) -> Result<SeekingOutcome> {
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::VocabMismatch {
            teacher: teacher.config.vocab_size,
            student: student.config.vocab_size,
        });
    }
    let seed_set = &train_set[..config.seed_size.min(train_set.len())];
    let map = seeking_sensitivity(teacher, seed_set)?;
    let selected = select_layers(&map, student.config.n_layers)?;
    let mut blocks = Vec::new();
    let mut adapters = Vec::new();
    for (k, &tl) in selected.iter().enumerate() {
        for t in SCORED_TENSORS {
            let target = block_tensor_name(k, t);
            let (n_s, m_s) = student.tensor(&target).expect("block tensor").shape();
            let w = teacher.tensor(&block_tensor_name(tl - 1, t)).expect("block tensor");
            let mut block = seeking_extract(w, map.matrix(tl, t).expect("scored"), n_s, m_s)?;
            block.source_layer = tl;
            let pair = seeking_lora_init(&block, config.rank)?;
            adapters.push(Adapter {
                tensor: target,
                b: pair.b,
                a: pair.a,
            });
            blocks.push(block);
        }
    }
    let mut set = AdapterSet { adapters };
    let initial = set.clone();
    let cfg = TrainConfig::new(config.steps, config.batch_size, config.learning_rate, config.seed);
    let (losses, aborted) = match train_adapters(student, &mut set, train_set, &cfg, |_, tr, b| {
        CrossEntropy.evaluate(tr, b)
    }) {
        Ok(r) => (r.losses, None),
        Err(Error::NumericalError(m)) => (Vec::new(), Some(m)),
        Err(e) => return Err(e),
    };
    let model = set.merged(student)?;
    let result = TransferResult {
        method: "seeking".into(),
        config: serde_json::to_value(config).expect("config serializes"),
        student_layers: (1..=student.config.n_layers).collect(),
        loss_curve: losses,
        breakdowns: Vec::new(),
        align_loss_before: None,
        align_loss_after: None,
        changed: student.diff_census(&model),
        student_checksum_before: student.checksum(),
        student_checksum_after: model.checksum(),
        target_checksum: None,
        aborted,
        extra: serde_json::json!({
            "teacher_layers": selected,
            "layer_scores": map.layers.iter().map(|l| l.score).collect::<Vec<_>>(),
            "cumulative_scores": blocks.iter().map(|b| b.cumulative_score).collect::<Vec<_>>(),
        }),
    };
    Ok(SeekingOutcome {
        model,
        adapters: set,
        initial_adapters: initial,
        selected_layers: selected,
        blocks,
        result,
    })
}
