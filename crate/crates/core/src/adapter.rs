//! Low-rank additive adapters: `W_eff = W + B·A` on named weight matrices
//! of a frozen base model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Example, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::model::{backward_with, Adam, LayerTrace, LmParams, TraceGrad, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// Name of the base tensor, as in [`LmParams::tensors`].
    pub tensor: String,
    /// `rows × r`.
    pub b: Matrix,
    /// `r × cols`.
    pub a: Matrix,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub adapters: Vec<Adapter>,
}

impl AdapterSet {
    /// Standard LoRA start: `A ~ N(0, 1/cols)`, `B = 0`, so the merged model
    /// initially equals the base.
    pub fn lora(base: &LmParams, tensors: &[String], rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::ConfigError("adapter rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = tensors
            .iter()
            .map(|name| {
                let w = base
                    .tensor(name)
                    .ok_or_else(|| Error::ConfigError(format!("no tensor named {name}")))?;
                let r = rank.min(w.rows()).min(w.cols());
                Ok(Adapter {
                    tensor: name.clone(),
                    b: Matrix::zeros(w.rows(), r),
                    a: Matrix::random_normal(&mut rng, r, w.cols(), 1.0 / (w.cols() as f64).sqrt()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(AdapterSet { adapters })
    }

    pub fn validate(&self, base: &LmParams) -> Result<()> {
        for ad in &self.adapters {
            let w = base
                .tensor(&ad.tensor)
                .ok_or_else(|| Error::ConfigError(format!("no tensor named {}", ad.tensor)))?;
            if ad.b.rows() != w.rows() || ad.a.cols() != w.cols() || ad.b.cols() != ad.a.rows() {
                return Err(Error::shape(format!(
                    "adapter on {} is {:?}·{:?}, tensor is {:?}",
                    ad.tensor,
                    ad.b.shape(),
                    ad.a.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// `base` with every adapter product added to its tensor.
    pub fn merged(&self, base: &LmParams) -> Result<LmParams> {
        self.validate(base)?;
        let mut out = base.clone();
        for ad in &self.adapters {
            let w = out.tensor_mut(&ad.tensor).expect("validated");
            gemm(1.0, &ad.b, false, &ad.a, false, 1.0, w);
        }
        Ok(out)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.adapters.iter_mut().flat_map(|a| [&mut a.b, &mut a.a]).collect()
    }
}

/// Trains only the adapter factors; `base` is never modified. The
/// objective sees the mini-batch's dataset indices.
pub fn train_adapters<F>(
    base: &LmParams,
    adapters: &mut AdapterSet,
    data: &[Example],
    config: &TrainConfig,
    mut objective: F,
) -> Result<TrainReport>
where
    F: FnMut(&[usize], &LayerTrace, &TokenBatch) -> Result<(f64, TraceGrad)>,
{
    if data.is_empty() {
        return Err(Error::DegenerateInput("training set is empty".into()));
    }
    adapters.validate(base)?;
    let shapes: Vec<(usize, usize)> = adapters
        .adapters
        .iter()
        .flat_map(|a| [a.b.shape(), a.a.shape()])
        .collect();
    let mut opt = Adam::new(config.optimizer.clone(), &shapes)?;
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.seed);
    let mut report = TrainReport {
        losses: Vec::with_capacity(config.steps),
        trained_tensors: adapters
            .adapters
            .iter()
            .map(|a| format!("adapter:{}", a.tensor))
            .collect(),
    };
    for step in 0..config.steps {
        let idx = sampler.next_batch();
        let batch = TokenBatch::from_examples(idx.iter().map(|&i| &data[i]))?;
        let merged = adapters.merged(base)?;
        let g = backward_with(&merged, &batch, |trace, batch| objective(&idx, trace, batch))?;
        report.losses.push(g.loss);
        let mut grads = Vec::with_capacity(shapes.len());
        for ad in &adapters.adapters {
            let gw = g.params.tensor(&ad.tensor).expect("validated");
            grads.push(gw.matmul_nt(&ad.a));
            grads.push(ad.b.matmul_tn(gw));
        }
        if !grads.iter().all(Matrix::is_finite) {
            return Err(Error::NumericalError(format!(
                "non-finite adapter gradient at step {step}"
            )));
        }
        let backup = adapters.clone();
        let grad_refs: Vec<&Matrix> = grads.iter().collect();
        opt.step(&mut adapters.tensors_mut(), &grad_refs)?;
        if !adapters.tensors_mut().iter().all(|t| t.is_finite()) {
            *adapters = backup;
            return Err(Error::NumericalError(format!("non-finite adapter at step {step}")));
        }
    }
    Ok(report)
}
