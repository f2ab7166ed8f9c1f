//! Layer attribution on the teacher and depth-aware teacher/student layer
//! pairing. Layer numbers in this module are 1-based.

use serde::{Deserialize, Serialize};

use crate::data::{Example, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{backward, CrossEntropy, LmParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_index: usize,
    pub score: f64,
}

/// Gradient×activation per layer: per token, `|Σ_c ∂L/∂h · h|`, averaged over
/// the supervised tokens. `grads[l]` and `acts[l]` are `tokens × D`.
pub fn grad_x_activation_scores(acts: &[Matrix], grads: &[Matrix], batch: &TokenBatch) -> Result<Vec<LayerScore>> {
    let rows = batch.supervised_rows();
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    acts.iter()
        .zip(grads)
        .enumerate()
        .map(|(l, (h, g))| {
            if h.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "layer {}: {:?} vs {:?}",
                    l + 1,
                    h.shape(),
                    g.shape()
                )));
            }
            let total: f64 = rows.iter().map(|&i| linalg::dot(h.row(i), g.row(i)).abs()).sum();
            Ok(LayerScore {
                layer_index: l + 1,
                score: total / rows.len() as f64,
            })
        })
        .collect()
}

/// Gradient×activation of the teacher's cross-entropy at each block's
/// supervision interface.
pub fn layer_grad_x_activation(teacher: &LmParams, batch: &TokenBatch) -> Result<Vec<LayerScore>> {
    if batch.n_supervised() == 0 {
        return Err(Error::EmptyMask);
    }
    let g = backward(teacher, batch, &CrossEntropy)?;
    grad_x_activation_scores(&g.trace.per_layer, &g.activations, batch)
}

/// [`layer_grad_x_activation`] over a dataset in chunks, weighting each
/// chunk by its supervised-token count.
pub fn attribute_dataset(teacher: &LmParams, data: &[Example], chunk: usize) -> Result<Vec<LayerScore>> {
    if data.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut totals = vec![0.0; teacher.config.n_layers];
    let mut count = 0usize;
    for part in data.chunks(chunk.max(1)) {
        let batch = TokenBatch::from_examples(part)?;
        let n = batch.n_supervised();
        if n == 0 {
            continue;
        }
        for (t, s) in totals.iter_mut().zip(layer_grad_x_activation(teacher, &batch)?) {
            *t += s.score * n as f64;
        }
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(totals
        .into_iter()
        .enumerate()
        .map(|(l, t)| LayerScore {
            layer_index: l + 1,
            score: t / count as f64,
        })
        .collect())
}

/// The `top_n` highest-scoring layers in depth order. Equal scores prefer
/// the shallower layer.
pub fn select_critical_layers(scores: &[LayerScore], top_n: usize) -> Result<Vec<usize>> {
    if top_n == 0 || top_n > scores.len() {
        return Err(Error::RangeError(format!(
            "top_n {top_n} must lie in 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<&LayerScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer_index.cmp(&b.layer_index)));
    let mut picked: Vec<usize> = order[..top_n].iter().map(|s| s.layer_index).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// `ℓᵀₖ = max(1, ⌊l_t·k / l_s⌋)` for `k = 1..=l_s`; entry `k-1` holds `ℓᵀₖ`.
pub fn pair_layers(l_t: usize, l_s: usize) -> Vec<usize> {
    (1..=l_s).map(|k| (l_t * k / l_s).max(1)).collect()
}

/// Smallest student layer whose base teacher layer is at or beyond
/// `critical`, or the last student layer.
pub fn locate_student_partner(critical: usize, mapping: &[usize]) -> usize {
    mapping
        .iter()
        .position(|&t| t >= critical)
        .map_or(mapping.len(), |i| i + 1)
}

/// Adjacent teacher layers `(lo, hi)` and weight `λ` on `hi` for student
/// layer `k_dagger`.
///
/// `u = l_t·k†/l_s` is evaluated in integers so exact ratios give exact
/// weights.
pub fn interpolation_weights(k_dagger: usize, l_t: usize, l_s: usize) -> (usize, usize, f64) {
    let num = l_t * k_dagger;
    let floor_u = num / l_s;
    let lo = floor_u.min(l_t.saturating_sub(1)).max(1);
    // u − lo = (num − lo·l_s) / l_s, signed when lo was clamped.
    let lambda = ((num as f64 - (lo * l_s) as f64) / l_s as f64).clamp(0.0, 1.0);
    (lo, lo + 1, lambda)
}

/// `(1−λ)·h_lo + λ·h_hi`. At `λ = 0` and `λ = 1` the matching input is
/// returned exactly.
pub fn interpolated_hidden(h_lo: &Matrix, h_hi: &Matrix, lambda: f64) -> Result<Matrix> {
    if h_lo.shape() != h_hi.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", h_lo.shape(), h_hi.shape())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::RangeError(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return Ok(h_lo.clone());
    }
    if lambda == 1.0 {
        return Ok(h_hi.clone());
    }
    let mut out = h_lo.scaled(1.0 - lambda);
    out.axpy(lambda, h_hi);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingEntry {
    pub student_k: usize,
    pub teacher_base: usize,
    pub lo: usize,
    pub hi: usize,
    pub lambda: f64,
}

impl PairingEntry {
    /// Whether the `hi` teacher layer contributes.
    pub fn uses_hi(&self) -> bool {
        self.lambda > 0.0
    }
}

/// One supervised pair: a critical teacher layer and its student partner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPair {
    pub critical_teacher: usize,
    pub student_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingPlan {
    pub l_t: usize,
    pub l_s: usize,
    pub entries: Vec<PairingEntry>,
    /// Supervised pairs in student-layer order, one per student layer.
    pub pairs: Vec<TransferPair>,
}

impl PairingPlan {
    /// Plan with every student layer's interpolation entry and no pairs.
    pub fn new(l_t: usize, l_s: usize) -> Result<Self> {
        if l_t == 0 || l_s == 0 {
            return Err(Error::RangeError("layer counts must be positive".into()));
        }
        let entries = pair_layers(l_t, l_s)
            .into_iter()
            .enumerate()
            .map(|(i, teacher_base)| {
                let (lo, hi, lambda) = interpolation_weights(i + 1, l_t, l_s);
                PairingEntry {
                    student_k: i + 1,
                    teacher_base,
                    lo,
                    hi,
                    lambda,
                }
            })
            .collect();
        Ok(PairingPlan {
            l_t,
            l_s,
            entries,
            pairs: Vec::new(),
        })
    }

    /// Plan supervising the partners of the given critical teacher layers.
    /// Critical layers sharing a partner collapse to the deepest one.
    pub fn from_critical(l_t: usize, l_s: usize, critical: &[usize]) -> Result<Self> {
        let mut plan = PairingPlan::new(l_t, l_s)?;
        let mapping = pair_layers(l_t, l_s);
        for &c in critical {
            if c == 0 || c > l_t {
                return Err(Error::RangeError(format!("critical layer {c} outside 1..={l_t}")));
            }
            let k = locate_student_partner(c, &mapping);
            match plan.pairs.iter_mut().find(|p| p.student_k == k) {
                Some(p) => p.critical_teacher = p.critical_teacher.max(c),
                None => plan.pairs.push(TransferPair {
                    critical_teacher: c,
                    student_k: k,
                }),
            }
        }
        plan.pairs.sort_by_key(|p| p.student_k);
        Ok(plan)
    }

    /// Attribution scores → critical layers → plan.
    pub fn from_scores(scores: &[LayerScore], l_s: usize, top_n: usize) -> Result<Self> {
        let critical = select_critical_layers(scores, top_n)?;
        PairingPlan::from_critical(scores.len(), l_s, &critical)
    }

    pub fn entry(&self, student_k: usize) -> Option<&PairingEntry> {
        self.entries.get(student_k.checked_sub(1)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigError(format!("pairing plan: {e}")))
    }
}
