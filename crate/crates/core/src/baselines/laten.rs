use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::pair_layers;
use crate::data::{Example, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{backward, Adam, CrossEntropy, LmParams, OptimizerConfig};
use crate::transfer::TransferResult;

/// Per-neuron FFN score `|a_j · ∂ℒ/∂a_j|` at the last supervised token of
/// each example, averaged over examples. `a` is the post-activation FFN
/// hidden; result is `layers × F`.
pub fn ffn_neuron_scores(model: &LmParams, data: &[Example]) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("extraction set is empty".into()));
    }
    let f = model.config.ffn_dim();
    let mut totals = vec![vec![0.0; f]; model.config.n_layers];
    for ex in data {
        let batch = TokenBatch::from_examples([ex])?;
        let t = *batch.supervised_rows().last().ok_or(Error::EmptyMask)?;
        let (_, cache) = crate::model::forward::forward_cached(model, &batch)?;
        let g = backward(model, &batch, &CrossEntropy)?;
        for (l, tot) in totals.iter_mut().enumerate() {
            let act = cache.blocks[l].act.row(t);
            // ∂ℒ/∂a = ∂ℒ/∂(a·W2) · W2ᵀ
            let g_act = Matrix::from_rows(&[g.activations[l].row(t).to_vec()])?.matmul_nt(&model.blocks[l].w2);
            for ((s, &a), &ga) in tot.iter_mut().zip(act).zip(g_act.as_slice()) {
                *s += (a * ga).abs();
            }
        }
    }
    let n = data.len() as f64;
    Ok(totals
        .into_iter()
        .map(|v| v.into_iter().map(|s| s / n).collect())
        .collect())
}

/// Indices of the `top_k` largest scores in ascending order; ties prefer
/// the lower index.
pub fn select_top_neurons(scores: &[f64], top_k: usize) -> Result<Vec<usize>> {
    if top_k == 0 || top_k > scores.len() {
        return Err(Error::RangeError(format!(
            "top_k {top_k} must lie in 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    order.sort_unstable();
    Ok(order)
}

/// Weight slices of the given FFN neurons in block `layer_index` (1-based):
/// row `i` is `[W1[:, j], W2[j, :]]` for neuron `j = neurons[i]`.
pub fn neuron_slices(params: &LmParams, layer_index: usize, neurons: &[usize]) -> Result<Matrix> {
    let b = params
        .blocks
        .get(layer_index.wrapping_sub(1))
        .ok_or_else(|| Error::RangeError(format!("layer {layer_index} outside 1..={}", params.config.n_layers)))?;
    let d = params.config.hidden_dim;
    let f = params.config.ffn_dim();
    if let Some(&j) = neurons.iter().find(|&&j| j >= f) {
        return Err(Error::RangeError(format!("neuron {j} outside 0..{f}")));
    }
    Ok(Matrix::from_fn(neurons.len(), 2 * d, |i, c| {
        let j = neurons[i];
        if c < d {
            b.w1[(c, j)]
        } else {
            b.w2[(j, c - d)]
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronSlices {
    /// 1-based.
    pub layer_index: usize,
    pub neurons: Vec<usize>,
    /// `neurons × 2D`, laid out as in [`neuron_slices`].
    pub values: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronDelta {
    pub hidden_dim: usize,
    pub layers: Vec<NeuronSlices>,
}

impl NeuronDelta {
    /// Entries per layer once vectorized; layers must agree.
    pub fn width(&self) -> Result<usize> {
        let w: Vec<usize> = self.layers.iter().map(|l| l.values.len()).collect();
        match w.first() {
            Some(&first) if w.iter().all(|&x| x == first) => Ok(first),
            Some(_) => Err(Error::shape("layers carry different numbers of slices")),
            None => Err(Error::DegenerateInput("no layers".into())),
        }
    }

    /// One row per layer, each layer's slices flattened row-major.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let w = self.width()?;
        let data = self
            .layers
            .iter()
            .flat_map(|l| l.values.as_slice().iter().copied())
            .collect();
        Matrix::from_vec(self.layers.len(), w, data)
    }

    /// Same neurons, values taken from the rows of `m`.
    pub fn with_values(&self, m: &Matrix) -> Result<NeuronDelta> {
        let w = self.width()?;
        if m.shape() != (self.layers.len(), w) {
            return Err(Error::shape(format!(
                "{:?} for {} layers of width {w}",
                m.shape(),
                self.layers.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(NeuronSlices {
                    layer_index: l.layer_index,
                    neurons: l.neurons.clone(),
                    values: Matrix::from_vec(l.values.rows(), l.values.cols(), m.row(i).to_vec())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(NeuronDelta {
            hidden_dim: self.hidden_dim,
            layers,
        })
    }

    pub fn negated(&self) -> NeuronDelta {
        let mut out = self.clone();
        out.layers.iter_mut().for_each(|l| l.values.scale(-1.0));
        out
    }
}

/// Locates the `top_k` FFN neurons of every teacher layer and records
/// their trained-minus-initial weight slices. The initial weights are
/// regenerated from the teacher's config seed.
pub fn laten_locate(teacher: &LmParams, extract_set: &[Example], top_k: usize) -> Result<NeuronDelta> {
    let init = LmParams::init(&teacher.config)?;
    laten_locate_from(teacher, &init, extract_set, top_k)
}

/// [`laten_locate`] against an explicit reference model.
pub fn laten_locate_from(
    teacher: &LmParams,
    reference: &LmParams,
    extract_set: &[Example],
    top_k: usize,
) -> Result<NeuronDelta> {
    let f = teacher.config.ffn_dim();
    if top_k == 0 || top_k > f {
        return Err(Error::RangeError(format!("top_k {top_k} must lie in 1..={f}")));
    }
    if reference.config != teacher.config {
        return Err(Error::ConfigError("reference model has a different config".into()));
    }
    let scores = ffn_neuron_scores(teacher, extract_set)?;
    let layers = scores
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let neurons = select_top_neurons(s, top_k)?;
            let values = neuron_slices(teacher, l + 1, &neurons)?.sub(&neuron_slices(reference, l + 1, &neurons)?);
            Ok(NeuronSlices {
                layer_index: l + 1,
                neurons,
                values,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NeuronDelta {
        hidden_dim: teacher.config.hidden_dim,
        layers,
    })
}

/// Adds each slice to its neuron's weights; nothing else changes.
pub fn laten_inject(student: &LmParams, deltas: &NeuronDelta) -> Result<LmParams> {
    let d = student.config.hidden_dim;
    let f = student.config.ffn_dim();
    if deltas.hidden_dim != d {
        return Err(Error::shape(format!(
            "deltas for width {}, student has {d}",
            deltas.hidden_dim
        )));
    }
    let mut out = student.clone();
    for l in &deltas.layers {
        if l.values.shape() != (l.neurons.len(), 2 * d) {
            return Err(Error::shape(format!(
                "layer {}: {:?} for {} neurons of width {}",
                l.layer_index,
                l.values.shape(),
                l.neurons.len(),
                2 * d
            )));
        }
        let n_layers = out.config.n_layers;
        let b = out
            .blocks
            .get_mut(l.layer_index.wrapping_sub(1))
            .ok_or_else(|| Error::RangeError(format!("layer {} outside 1..={n_layers}", l.layer_index)))?;
        for (i, &j) in l.neurons.iter().enumerate() {
            if j >= f {
                return Err(Error::RangeError(format!("neuron {j} outside 0..{f}")));
            }
            let row = l.values.row(i);
            for c in 0..d {
                b.w1.as_mut_slice()[c * f + j] += row[c];
                b.w2.as_mut_slice()[j * d + c] += row[d + c];
            }
        }
    }
    Ok(out)
}

/// `y = relu(x·W1)·W2`, one row per layer delta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNet {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl HyperNet {
    /// `W1 ~ N(0, 1/in)`; `W2 = 0`, so the initial map is zero.
    pub fn new(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HyperNet {
            w1: Matrix::random_normal(&mut rng, input, hidden, 1.0 / (input as f64).sqrt()),
            w2: Matrix::zeros(hidden, output),
        }
    }

    pub fn hidden(&self, x: &Matrix) -> Matrix {
        let mut h = x.matmul(&self.w1);
        h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        h
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.w1.rows() {
            return Err(Error::shape(format!(
                "input width {} for a {:?} layer",
                x.cols(),
                self.w1.shape()
            )));
        }
        Ok(self.hidden(x).matmul(&self.w2))
    }

    /// Gradients on `(W1, W2)` given `∂ℒ/∂y`.
    pub fn backward(&self, x: &Matrix, grad_y: &Matrix) -> (Matrix, Matrix) {
        let h = self.hidden(x);
        let g_w2 = h.matmul_tn(grad_y);
        let mut g_h = grad_y.matmul_nt(&self.w2);
        for (g, &hv) in g_h.as_mut_slice().iter_mut().zip(h.as_slice()) {
            if hv <= 0.0 {
                *g = 0.0;
            }
        }
        (x.matmul_tn(&g_h), g_w2)
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatenAlignReport {
    /// Student-shaped deltas from the best hypernetwork.
    pub deltas: NeuronDelta,
    /// Align-set loss of each checkpoint; entry 0 is before any update.
    pub losses: Vec<f64>,
    pub best_step: usize,
    pub aborted: Option<String>,
}

/// Trains `hypernet` so that injecting its output into `student` lowers the
/// LM loss on `align_set`. Student weights are never modified; `hypernet`
/// is left at the best checkpoint. `slots` fixes the student neurons
/// each output row is written to.
pub fn laten_align(
    hypernet: &mut HyperNet,
    teacher_deltas: &Matrix,
    slots: &NeuronDelta,
    student: &LmParams,
    align_set: &[Example],
    steps: usize,
    optimizer: &OptimizerConfig,
) -> Result<LatenAlignReport> {
    if align_set.is_empty() {
        return Err(Error::DegenerateInput("alignment set is empty".into()));
    }
    if teacher_deltas.rows() != slots.layers.len() || hypernet.w2.cols() != slots.width()? {
        return Err(Error::shape(format!(
            "{} teacher rows and a {:?} output layer for {} student layers of width {}",
            teacher_deltas.rows(),
            hypernet.w2.shape(),
            slots.layers.len(),
            slots.width()?
        )));
    }
    let batch = TokenBatch::from_examples(align_set)?;
    let d = student.config.hidden_dim;
    let mut opt = Adam::new(optimizer.clone(), &[hypernet.w1.shape(), hypernet.w2.shape()])?;
    let mut best = hypernet.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    let mut best_step = 0;
    let mut aborted = None;
    for step in 0..=steps {
        let deltas = slots.with_values(&hypernet.forward(teacher_deltas)?)?;
        let injected = laten_inject(student, &deltas)?;
        let g = backward(&injected, &batch, &CrossEntropy)?;
        losses.push(g.loss);
        if g.loss < losses[best_step] {
            best_step = step;
            best = hypernet.clone();
        }
        if step == steps {
            break;
        }
        let grad_y = Matrix::from_fn(slots.layers.len(), slots.width()?, |r, c| {
            let l = &slots.layers[r];
            let (i, col) = (c / (2 * d), c % (2 * d));
            let j = l.neurons[i];
            let gb = &g.params.blocks[l.layer_index - 1];
            if col < d {
                gb.w1[(col, j)]
            } else {
                gb.w2[(j, col - d)]
            }
        });
        let (g1, g2) = hypernet.backward(teacher_deltas, &grad_y);
        opt.step(&mut [&mut hypernet.w1, &mut hypernet.w2], &[&g1, &g2])?;
        if !hypernet.is_finite() {
            aborted = Some(format!("hypernetwork diverged at step {step}"));
            break;
        }
    }
    *hypernet = best;
    let deltas = slots.with_values(&hypernet.forward(teacher_deltas)?)?;
    Ok(LatenAlignReport {
        deltas,
        losses,
        best_step,
        aborted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatenConfig {
    /// Fraction of FFN neurons per layer that are transferred.
    pub neuron_fraction: f64,
    /// Examples used for location and alignment.
    pub align_size: usize,
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LatenConfig {
    fn default() -> Self {
        LatenConfig {
            neuron_fraction: 0.1,
            align_size: 16,
            hidden: 64,
            steps: 50,
            learning_rate: 1e-5,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl LatenConfig {
    fn top_k(&self, f: usize) -> Result<usize> {
        if !(self.neuron_fraction > 0.0 && self.neuron_fraction <= 1.0) {
            return Err(Error::ConfigError(format!(
                "neuron_fraction {} outside (0, 1]",
                self.neuron_fraction
            )));
        }
        Ok(((self.neuron_fraction * f as f64).ceil() as usize).clamp(1, f))
    }
}

/// Locate on the teacher, align a hypernetwork on the student, inject once.
/// Student layer `k` receives the mapped delta of teacher layer
/// `max(1, ⌊l_t·k/l_s⌋)`, written into the student's own top neurons.
pub fn laten_transfer(
    teacher: &LmParams,
    student: &LmParams,
    dataset: &[Example],
    config: &LatenConfig,
) -> Result<(LmParams, LatenAlignReport, TransferResult)> {
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::VocabMismatch {
            teacher: teacher.config.vocab_size,
            student: student.config.vocab_size,
        });
    }
    let set = &dataset[..config.align_size.min(dataset.len())];
    let teacher_delta = laten_locate(teacher, set, config.top_k(teacher.config.ffn_dim())?)?;
    let mapping = pair_layers(teacher.config.n_layers, student.config.n_layers);
    let picked = NeuronDelta {
        hidden_dim: teacher_delta.hidden_dim,
        layers: mapping.iter().map(|&t| teacher_delta.layers[t - 1].clone()).collect(),
    };
    let x = picked.to_matrix()?;
    let s_scores = ffn_neuron_scores(student, set)?;
    let s_k = config.top_k(student.config.ffn_dim())?;
    let d_s = student.config.hidden_dim;
    let slots = NeuronDelta {
        hidden_dim: d_s,
        layers: s_scores
            .iter()
            .enumerate()
            .map(|(l, s)| {
                Ok(NeuronSlices {
                    layer_index: l + 1,
                    neurons: select_top_neurons(s, s_k)?,
                    values: Matrix::zeros(s_k, 2 * d_s),
                })
            })
            .collect::<Result<_>>()?,
    };
    let mut net = HyperNet::new(x.cols(), config.hidden, slots.width()?, config.seed);
    let opt = OptimizerConfig::adamw(config.learning_rate, config.weight_decay);
    let report = laten_align(&mut net, &x, &slots, student, set, config.steps, &opt)?;
    let model = laten_inject(student, &report.deltas)?;
    let result = TransferResult {
        method: "laten".into(),
        config: serde_json::to_value(config).expect("config serializes"),
        student_layers: (1..=student.config.n_layers).collect(),
        loss_curve: report.losses.clone(),
        breakdowns: Vec::new(),
        align_loss_before: None,
        align_loss_after: None,
        changed: student.diff_census(&model),
        student_checksum_before: student.checksum(),
        student_checksum_after: model.checksum(),
        target_checksum: None,
        aborted: report.aborted.clone(),
        extra: serde_json::json!({
            "teacher_layers": mapping,
            "best_step": report.best_step,
            "teacher_neurons": picked.layers.iter().map(|l| l.neurons.clone()).collect::<Vec<_>>(),
            "student_neurons": slots.layers.iter().map(|l| l.neurons.clone()).collect::<Vec<_>>(),
        }),
    };
    Ok((model, report, result))
}
