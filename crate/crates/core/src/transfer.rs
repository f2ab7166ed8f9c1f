//! Cosine alignment of a student layer to recomposed teacher hidden states.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{train_adapters, AdapterSet};
use crate::attribution::{interpolated_hidden, PairingEntry, PairingPlan};
use crate::data::{Example, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{
    forward_with_trace, train_with, LayerTrace, LmParams, Objective, TraceGrad, TrainConfig, TrainableMask,
    BLOCK_TENSORS,
};
use crate::semantics::{cross_space_rows, SemanticBasisSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionRecord {
    pub teacher_lo: usize,
    pub teacher_hi: usize,
    pub lambda: f64,
    pub teacher_bases_checksum: String,
    pub student_bases_checksum: String,
}

/// Frozen per-token targets for one student layer on one batch. `targets`
/// row `j` is the target for batch row `rows[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisoryTarget {
    /// 1-based student layer.
    pub student_layer_k: usize,
    pub rows: Vec<usize>,
    pub targets: Matrix,
    /// Supervised rows dropped because the teacher state was zero.
    pub excluded_rows: Vec<usize>,
    pub record: ConstructionRecord,
}

impl SupervisoryTarget {
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.student_layer_k as u64).to_le_bytes());
        for &r in &self.rows {
            h.update((r as u64).to_le_bytes());
        }
        for v in self.targets.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn record_for(entry: &PairingEntry, tb: &SemanticBasisSet, sb: &SemanticBasisSet) -> ConstructionRecord {
    ConstructionRecord {
        teacher_lo: entry.lo,
        teacher_hi: entry.hi,
        lambda: entry.lambda,
        teacher_bases_checksum: tb.checksum(),
        student_bases_checksum: sb.checksum(),
    }
}

/// Teacher hidden at `(lo, hi, λ)` for each supervised token, mapped into
/// the student space through the two basis sets.
pub fn build_targets(
    teacher: &LmParams,
    teacher_bases: &SemanticBasisSet,
    student_bases: &SemanticBasisSet,
    entry: &PairingEntry,
    batch: &TokenBatch,
) -> Result<SupervisoryTarget> {
    let trace = forward_with_trace(teacher, batch)?;
    targets_from_trace(&trace, teacher_bases, student_bases, entry, batch)
}

pub fn targets_from_trace(
    trace: &LayerTrace,
    teacher_bases: &SemanticBasisSet,
    student_bases: &SemanticBasisSet,
    entry: &PairingEntry,
    batch: &TokenBatch,
) -> Result<SupervisoryTarget> {
    let l_t = trace.n_layers();
    let layer = |l: usize| {
        trace
            .per_layer
            .get(l.wrapping_sub(1))
            .ok_or_else(|| Error::RangeError(format!("teacher layer {l} outside 1..={l_t}")))
    };
    let h_lo = layer(entry.lo)?;
    let h = if entry.uses_hi() {
        interpolated_hidden(h_lo, layer(entry.hi)?, entry.lambda)?
    } else {
        h_lo.clone()
    };
    let sup = batch.supervised_rows();
    if sup.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mapped, zeros) = cross_space_rows(&h.select_rows(&sup), teacher_bases, student_bases)?;
    let excluded_rows: Vec<usize> = zeros.iter().map(|&j| sup[j]).collect();
    if !excluded_rows.is_empty() {
        log::warn!(
            "{} supervised tokens have a zero teacher state and are excluded",
            excluded_rows.len()
        );
    }
    let keep: Vec<usize> = (0..sup.len()).filter(|j| zeros.binary_search(j).is_err()).collect();
    Ok(SupervisoryTarget {
        student_layer_k: entry.student_k,
        rows: keep.iter().map(|&j| sup[j]).collect(),
        targets: mapped.select_rows(&keep),
        excluded_rows,
        record: record_for(entry, teacher_bases, student_bases),
    })
}

/// Targets built once per example, so mini-batches can be assembled
/// without re-running the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub student_layer_k: usize,
    pub record: ConstructionRecord,
    /// Per example: rows are positions within that example.
    pub examples: Vec<SupervisoryTarget>,
    pub seq_lens: Vec<usize>,
}

impl TargetSet {
    pub fn build(
        teacher: &LmParams,
        teacher_bases: &SemanticBasisSet,
        student_bases: &SemanticBasisSet,
        entry: &PairingEntry,
        examples: &[Example],
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(examples.len());
        let mut seq_lens = Vec::with_capacity(examples.len());
        for chunk in examples.chunk_by(|a, b| a.input_len() == b.input_len()) {
            for part in chunk.chunks(64) {
                let batch = TokenBatch::from_examples(part)?;
                let t = build_targets(teacher, teacher_bases, student_bases, entry, &batch)?;
                let seq = batch.seq_len;
                for b in 0..part.len() {
                    let range = b * seq..(b + 1) * seq;
                    let picks: Vec<usize> = (0..t.rows.len()).filter(|&j| range.contains(&t.rows[j])).collect();
                    out.push(SupervisoryTarget {
                        student_layer_k: t.student_layer_k,
                        rows: picks.iter().map(|&j| t.rows[j] - b * seq).collect(),
                        targets: t.targets.select_rows(&picks),
                        excluded_rows: t
                            .excluded_rows
                            .iter()
                            .filter(|r| range.contains(r))
                            .map(|r| r - b * seq)
                            .collect(),
                        record: t.record.clone(),
                    });
                    seq_lens.push(seq);
                }
            }
        }
        Ok(TargetSet {
            student_layer_k: entry.student_k,
            record: record_for(entry, teacher_bases, student_bases),
            examples: out,
            seq_lens,
        })
    }

    /// Target for the batch formed from `indices`, in that order.
    pub fn for_batch(&self, indices: &[usize]) -> Result<SupervisoryTarget> {
        let mut rows = Vec::new();
        let mut excluded = Vec::new();
        let mut parts = Vec::with_capacity(indices.len());
        for (b, &i) in indices.iter().enumerate() {
            let t = self
                .examples
                .get(i)
                .ok_or_else(|| Error::RangeError(format!("example {i} has no target")))?;
            let off = b * self.seq_lens[i];
            rows.extend(t.rows.iter().map(|r| r + off));
            excluded.extend(t.excluded_rows.iter().map(|r| r + off));
            parts.push(&t.targets);
        }
        Ok(SupervisoryTarget {
            student_layer_k: self.student_layer_k,
            rows,
            targets: Matrix::vstack(&parts)?,
            excluded_rows: excluded,
            record: self.record.clone(),
        })
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.examples {
            h.update(t.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Mean over `rows` of `cos(x_r, y_j)`, skipping pairs with a zero vector,
/// and the gradient of `1 − mean` with respect to `x`.
fn mean_cosine_loss(x: &Matrix, rows: &[usize], y: &Matrix) -> Result<(f64, Matrix)> {
    if rows.len() != y.rows() || (y.rows() > 0 && x.cols() != y.cols()) {
        return Err(Error::shape(format!(
            "{} rows against {:?} targets of width {}",
            rows.len(),
            y.shape(),
            x.cols()
        )));
    }
    let mut used = Vec::with_capacity(rows.len());
    for (j, &r) in rows.iter().enumerate() {
        let (xr, yr) = (x.row(r), y.row(j));
        let (nx, ny) = (linalg::norm(xr), linalg::norm(yr));
        if nx == 0.0 || ny == 0.0 {
            log::debug!("row {r} skipped: zero vector");
            continue;
        }
        used.push((r, j, nx, ny, (linalg::dot(xr, yr) / (nx * ny)).clamp(-1.0, 1.0)));
    }
    if used.is_empty() {
        return Err(Error::DegenerateInput("no supervised row with non-zero vectors".into()));
    }
    let n = used.len() as f64;
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut total = 0.0;
    for &(r, j, nx, ny, c) in &used {
        total += c;
        let (xr, yr) = (x.row(r), y.row(j));
        for ((g, &xv), &yv) in grad.row_mut(r).iter_mut().zip(xr).zip(yr) {
            *g = -(yv / (nx * ny) - c * xv / (nx * nx)) / n;
        }
    }
    Ok(((1.0 - total / n).clamp(0.0, 2.0), grad))
}

/// `ℒ_layer = 1 − Avg cos(h_r, target_r)` over the target's rows, with the
/// gradient on `h`.
pub fn cosine_layer_loss_with_grad(h: &Matrix, target: &SupervisoryTarget) -> Result<(f64, Matrix)> {
    mean_cosine_loss(h, &target.rows, &target.targets)
}

pub fn cosine_layer_loss(h: &Matrix, target: &SupervisoryTarget) -> Result<f64> {
    cosine_layer_loss_with_grad(h, target).map(|(l, _)| l)
}

/// `ℒ_out = 1 − Avg cos(z_t, y_t)` over supervised positions, where `y_t` is
/// the one-hot target, optionally label-smoothed by `smoothing`.
pub fn cosine_output_loss_with_grad(z: &Matrix, batch: &TokenBatch, smoothing: f64) -> Result<(f64, Matrix)> {
    let rows = batch.supervised_rows();
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::RangeError(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let v = z.cols();
    let off = smoothing / v as f64;
    let y = Matrix::from_fn(rows.len(), v, |j, c| {
        if c == batch.target_ids[rows[j]] {
            1.0 - smoothing + off
        } else {
            off
        }
    });
    mean_cosine_loss(z, &rows, &y)
}

pub fn cosine_output_loss(z: &Matrix, batch: &TokenBatch) -> Result<f64> {
    cosine_output_loss_with_grad(z, batch, 0.0).map(|(l, _)| l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layer_loss: f64,
    pub out_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(layer_loss: f64, out_loss: f64) -> Self {
        LossBreakdown {
            layer_loss,
            out_loss,
            total: layer_loss + out_loss,
        }
    }
}

/// The two-term cosine objective for a student trace. Returns the
/// breakdown and the gradient on the trace.
pub fn semalign_objective(
    trace: &LayerTrace,
    batch: &TokenBatch,
    targets: &[&SupervisoryTarget],
    smoothing: f64,
) -> Result<(LossBreakdown, TraceGrad)> {
    let mut grad = TraceGrad::empty(trace.n_layers());
    let mut layer_loss = 0.0;
    for t in targets {
        let k = t.student_layer_k;
        let h = trace
            .per_layer
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::RangeError(format!("student layer {k} outside 1..={}", trace.n_layers())))?;
        let (l, g) = cosine_layer_loss_with_grad(h, t)?;
        layer_loss += l;
        match &mut grad.per_layer[k - 1] {
            Some(acc) => acc.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }
    let (out_loss, gz) = cosine_output_loss_with_grad(&trace.logits, batch, smoothing)?;
    grad.logits = Some(gz);
    Ok((LossBreakdown::new(layer_loss, out_loss), grad))
}

/// Forward the student and evaluate the objective against `target`.
pub fn semalign_total_loss(
    student: &LmParams,
    batch: &TokenBatch,
    target: &SupervisoryTarget,
) -> Result<LossBreakdown> {
    let trace = forward_with_trace(student, batch)?;
    semalign_objective(&trace, batch, &[target], 0.0).map(|(b, _)| b)
}

/// [`Objective`] wrapper for a fixed batch target.
pub struct SemAlignObjective<'a> {
    pub targets: Vec<&'a SupervisoryTarget>,
    pub label_smoothing: f64,
}

impl Objective for SemAlignObjective<'_> {
    fn evaluate(&self, trace: &LayerTrace, batch: &TokenBatch) -> Result<(f64, TraceGrad)> {
        semalign_objective(trace, batch, &self.targets, self.label_smoothing).map(|(b, g)| (b.total, g))
    }
}

/// `ℒ_out` alone.
pub struct OutputCosineObjective {
    pub label_smoothing: f64,
}

impl Objective for OutputCosineObjective {
    fn evaluate(&self, trace: &LayerTrace, batch: &TokenBatch) -> Result<(f64, TraceGrad)> {
        let (l, gz) = cosine_output_loss_with_grad(&trace.logits, batch, self.label_smoothing)?;
        let mut g = TraceGrad::empty(trace.n_layers());
        g.logits = Some(gz);
        Ok((l, g))
    }
}

fn default_batch_size() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// 1-based student layer to train; `None` takes every pair of the plan.
    #[serde(default)]
    pub student_layer_k: Option<usize>,
    pub steps: usize,
    /// Number of examples carrying alignment targets.
    pub align_size: usize,
    /// Size of the task training pool the student is trained on.
    pub train_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Train rank-`r` adapters on block `k` instead of its weights.
    #[serde(default)]
    pub adapter_rank: Option<usize>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            student_layer_k: None,
            steps: 200,
            align_size: 256,
            train_size: 2048,
            learning_rate: 1e-3,
            seed: 0,
            batch_size: default_batch_size(),
            label_smoothing: 0.0,
            adapter_rank: None,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigError(format!("transfer config: {m}")));
        if self.align_size == 0 || self.train_size == 0 || self.batch_size == 0 {
            return bad("counts must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.student_layer_k == Some(0) {
            return bad("student_layer_k is 1-based");
        }
        if self.adapter_rank == Some(0) {
            return bad("adapter_rank must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig::new(self.steps, self.batch_size, self.learning_rate, self.seed)
    }
}

/// Which objective a transfer run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferObjective {
    /// `ℒ_layer + ℒ_out`.
    SemAlign,
    /// `ℒ_out` only, on the same layers and budget.
    OutputOnly,
}

/// JSON-serializable record of one transfer run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub method: String,
    pub config: serde_json::Value,
    /// 1-based student layers that were trained.
    pub student_layers: Vec<usize>,
    /// Value of the optimized objective at each step.
    pub loss_curve: Vec<f64>,
    /// Per-step cosine terms; empty for methods that do not use them.
    #[serde(default)]
    pub breakdowns: Vec<LossBreakdown>,
    pub align_loss_before: Option<LossBreakdown>,
    pub align_loss_after: Option<LossBreakdown>,
    /// Tensors whose bits changed, with the number of changed entries.
    pub changed: Vec<(String, usize)>,
    pub student_checksum_before: String,
    pub student_checksum_after: String,
    pub target_checksum: Option<String>,
    /// Set when training stopped early; the returned student is the last
    /// finite state.
    pub aborted: Option<String>,
    /// Method-specific details.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Mean breakdown over the whole alignment set.
pub fn alignment_loss(student: &LmParams, examples: &[Example], targets: &[TargetSet]) -> Result<LossBreakdown> {
    let mut layer = 0.0;
    let mut out = 0.0;
    let mut weight = 0.0;
    let idx: Vec<usize> = (0..examples.len()).collect();
    for part in idx.chunks(64) {
        let batch = TokenBatch::from_examples(part.iter().map(|&i| &examples[i]))?;
        let t: Vec<SupervisoryTarget> = targets.iter().map(|s| s.for_batch(part)).collect::<Result<_>>()?;
        let refs: Vec<&SupervisoryTarget> = t.iter().collect();
        let trace = forward_with_trace(student, &batch)?;
        let (b, _) = semalign_objective(&trace, &batch, &refs, 0.0)?;
        let w = part.len() as f64;
        layer += b.layer_loss * w;
        out += b.out_loss * w;
        weight += w;
    }
    Ok(LossBreakdown::new(layer / weight, out / weight))
}

/// Trains the paired student layer(s) toward teacher targets recomposed in
/// the student's semantic space. Parameters outside the trained blocks are
/// never modified.
#[allow(clippy::too_many_arguments)]
pub fn run_transfer(
    teacher: &LmParams,
    student: &LmParams,
    plan: &PairingPlan,
    bases: (&SemanticBasisSet, &SemanticBasisSet),
    dataset: &[Example],
    config: &TransferConfig,
    objective: TransferObjective,
) -> Result<(LmParams, TransferResult)> {
    config.validate()?;
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::VocabMismatch {
            teacher: teacher.config.vocab_size,
            student: student.config.vocab_size,
        });
    }
    let layers: Vec<usize> = match config.student_layer_k {
        Some(k) => vec![k],
        None if plan.pairs.is_empty() => return Err(Error::ConfigError("pairing plan has no pairs".into())),
        None => plan.pairs.iter().map(|p| p.student_k).collect(),
    };
    let entries: Vec<PairingEntry> = layers
        .iter()
        .map(|&k| {
            plan.entry(k)
                .copied()
                .filter(|_| k <= student.config.n_layers)
                .ok_or_else(|| Error::RangeError(format!("student layer {k} not in plan")))
        })
        .collect::<Result<_>>()?;
    let align: Vec<Example> = dataset.iter().take(config.align_size).cloned().collect();
    if align.is_empty() {
        return Err(Error::DegenerateInput("alignment set is empty".into()));
    }
    let targets: Vec<TargetSet> = entries
        .iter()
        .map(|e| TargetSet::build(teacher, bases.0, bases.1, e, &align))
        .collect::<Result<_>>()?;
    let target_checksum = {
        let mut h = Sha256::new();
        targets.iter().for_each(|t| h.update(t.checksum().as_bytes()));
        hex::encode(h.finalize())
    };
    let before = alignment_loss(student, &align, &targets)?;

    let mut curve = Vec::with_capacity(config.steps);
    let smoothing = config.label_smoothing;
    let mut step_objective = |idx: &[usize], trace: &LayerTrace, batch: &TokenBatch| -> Result<(f64, TraceGrad)> {
        let t: Vec<SupervisoryTarget> = targets.iter().map(|s| s.for_batch(idx)).collect::<Result<_>>()?;
        let refs: Vec<&SupervisoryTarget> = t.iter().collect();
        let (b, mut g) = semalign_objective(trace, batch, &refs, smoothing)?;
        curve.push(b);
        match objective {
            TransferObjective::SemAlign => Ok((b.total, g)),
            TransferObjective::OutputOnly => {
                g.per_layer.iter_mut().for_each(|s| *s = None);
                Ok((b.out_loss, g))
            }
        }
    };
    let train_cfg = config.train_config();
    let mut trained = student.clone();
    let outcome = match config.adapter_rank {
        None => {
            let mask = TrainableMask::Tensors(
                layers
                    .iter()
                    .flat_map(|&k| {
                        BLOCK_TENSORS
                            .iter()
                            .map(move |t| crate::model::block_tensor_name(k - 1, t))
                    })
                    .collect(),
            );
            train_with(&mut trained, &align, &mask, &train_cfg, &mut step_objective).map(|_| ())
        }
        Some(r) => {
            let names: Vec<String> = layers
                .iter()
                .flat_map(|&k| {
                    ["wq", "wk", "wv", "wo", "w1", "w2"]
                        .into_iter()
                        .map(move |t| crate::model::block_tensor_name(k - 1, t))
                })
                .collect();
            let mut set = AdapterSet::lora(student, &names, r, config.seed)?;
            let res = train_adapters(student, &mut set, &align, &train_cfg, &mut step_objective).map(|_| ());
            trained = set.merged(student)?;
            res
        }
    };
    let aborted = match outcome {
        Ok(()) => None,
        Err(Error::NumericalError(m)) => {
            log::warn!("transfer stopped early: {m}");
            Some(m)
        }
        Err(e) => return Err(e),
    };
    let after = alignment_loss(&trained, &align, &targets)?;
    let method = match objective {
        TransferObjective::SemAlign => "semalign",
        TransferObjective::OutputOnly => "output_only",
    };
    let result = TransferResult {
        method: method.into(),
        config: serde_json::to_value(config).expect("config serializes"),
        student_layers: layers,
        loss_curve: curve
            .iter()
            .map(|b| match objective {
                TransferObjective::SemAlign => b.total,
                TransferObjective::OutputOnly => b.out_loss,
            })
            .collect(),
        breakdowns: curve,
        align_loss_before: Some(before),
        align_loss_after: Some(after),
        changed: student.diff_census(&trained),
        student_checksum_before: student.checksum(),
        student_checksum_after: trained.checksum(),
        target_checksum: Some(target_checksum),
        aborted,
        extra: serde_json::Value::Null,
    };
    Ok((trained, result))
}
