use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Example, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{forward_with_trace, LmParams};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
/// Token id of symbol value 0.
pub const FIRST_SYMBOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularSum,
    SortDigits,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::ModularSum,
        TaskKind::SortDigits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularSum => "modular_sum",
            TaskKind::SortDigits => "sort_digits",
        }
    }

    /// Answer values for a body of symbol values.
    pub fn reference_answer(self, body: &[usize], modulus: usize) -> Vec<usize> {
        match self {
            TaskKind::Copy => body.to_vec(),
            TaskKind::Reverse => body.iter().rev().copied().collect(),
            TaskKind::ModularSum => body
                .iter()
                .scan(0, |acc, &x| {
                    *acc = (*acc + x) % modulus;
                    Some(*acc)
                })
                .collect(),
            TaskKind::SortDigits => {
                let mut s = body.to_vec();
                s.sort_unstable();
                s
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::ConfigError(format!("unknown task {s:?}")))
    }
}

fn default_alphabet() -> usize {
    62
}

fn default_modulus() -> usize {
    10
}

/// A synthetic task. Sequences are `BOS body SEP answer` with symbol value
/// `x` encoded as token `x + 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Body length (operands or symbols per example).
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    /// Symbol alphabet for copy and reverse.
    #[serde(default = "default_alphabet")]
    pub alphabet: usize,
    /// Modulus for modular_sum; digit range for sort_digits.
    #[serde(default = "default_modulus")]
    pub modulus: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, seq_len: usize, seed: u64) -> Self {
        TaskSpec {
            kind,
            vocab_size,
            seq_len,
            train_size: 2048,
            eval_size: 256,
            seed,
            alphabet: default_alphabet(),
            modulus: default_modulus(),
        }
    }

    /// Number of distinct body values.
    pub fn symbols(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => self.alphabet,
            TaskKind::ModularSum | TaskKind::SortDigits => self.modulus,
        }
    }

    /// Tokens per example.
    pub fn example_len(&self) -> usize {
        2 * self.seq_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigError(format!("task {}: {m}", self.kind)));
        if self.seq_len == 0 {
            return bad("seq_len must be positive".into());
        }
        if self.symbols() < 2 {
            return bad("needs at least two symbols".into());
        }
        if FIRST_SYMBOL + self.symbols() > self.vocab_size {
            return bad(format!(
                "{} symbols plus BOS/SEP need a vocabulary of {}, got {}",
                self.symbols(),
                FIRST_SYMBOL + self.symbols(),
                self.vocab_size
            ));
        }
        let space = (self.symbols() as f64).powi(self.seq_len as i32);
        if ((self.train_size + self.eval_size) as f64) > space {
            return bad(format!(
                "{} examples requested from only {space} distinct sequences",
                self.train_size + self.eval_size
            ));
        }
        Ok(())
    }

    pub fn encode(&self, body: &[usize]) -> Example {
        let answer = self.kind.reference_answer(body, self.modulus);
        let mut tokens = Vec::with_capacity(self.example_len());
        tokens.push(BOS);
        tokens.extend(body.iter().map(|x| x + FIRST_SYMBOL));
        tokens.push(SEP);
        tokens.extend(answer.iter().map(|x| x + FIRST_SYMBOL));
        Example {
            tokens,
            answer_start: self.seq_len + 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Dataset {
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for ex in self.train.iter().chain(&self.eval) {
            for &t in &ex.tokens {
                h.update((t as u32).to_le_bytes());
            }
            h.update((ex.answer_start as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn id(&self) -> String {
        format!("{}-{}", self.spec.kind, &self.checksum()[..12])
    }
}

/// Distinct bodies drawn uniformly, the first `train_size` for training
/// and the rest for evaluation.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_size + spec.eval_size;
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while examples.len() < total {
        attempts += 1;
        if attempts > 64 * total + 1024 {
            return Err(Error::ConfigError(format!(
                "could not draw {total} distinct {} examples",
                spec.kind
            )));
        }
        let body: Vec<usize> = (0..spec.seq_len).map(|_| rng.random_range(0..spec.symbols())).collect();
        if seen.insert(body.clone()) {
            examples.push(spec.encode(&body));
        }
    }
    let eval = examples.split_off(spec.train_size);
    Ok(Dataset {
        spec: spec.clone(),
        train: examples,
        eval,
    })
}

/// Fraction of examples whose argmax prediction is right at every answer
/// position. Inputs are teacher-forced, which for exact match is the same
/// as greedy decoding.
pub fn evaluate_accuracy(model: &LmParams, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for group in data.chunk_by(|a, b| a.input_len() == b.input_len()) {
        for part in group.chunks(64) {
            let batch = TokenBatch::from_examples(part)?;
            let logits = forward_with_trace(model, &batch)?.logits;
            for b in 0..part.len() {
                let ok = (0..batch.seq_len).map(|t| b * batch.seq_len + t).all(|r| {
                    !batch.supervised_mask[r] || {
                        let row = logits.row(r);
                        let arg = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                        arg == batch.target_ids[r]
                    }
                });
                correct += ok as usize;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmConfig;

    #[test]
    fn task_oracles() {
        assert_eq!(TaskKind::Copy.reference_answer(&[3, 1, 4], 10), vec![3, 1, 4]);
        assert_eq!(TaskKind::Reverse.reference_answer(&[3, 1, 4], 10), vec![4, 1, 3]);
        assert_eq!(TaskKind::ModularSum.reference_answer(&[7, 8], 10), vec![7, 5]);
        assert_eq!(TaskKind::SortDigits.reference_answer(&[3, 1, 4], 10), vec![1, 3, 4]);
        let spec = TaskSpec::new(TaskKind::ModularSum, 16, 2, 0);
        let ex = spec.encode(&[7, 8]);
        assert_eq!(ex.tokens, vec![BOS, 9, 10, SEP, 9, 7]);
        assert_eq!(*ex.answer().last().unwrap() - FIRST_SYMBOL, 5);
        let copy = TaskSpec::new(TaskKind::Copy, 16, 3, 0).encode(&[3, 1, 4]);
        assert_eq!(copy.answer(), &[5, 3, 6]);
    }

    #[test]
    fn datasets_are_deterministic_and_disjoint() {
        for kind in TaskKind::ALL {
            let mut spec = TaskSpec::new(kind, 64, 4, 11);
            spec.train_size = 200;
            spec.eval_size = 50;
            let a = generate_dataset(&spec).unwrap();
            let b = generate_dataset(&spec).unwrap();
            assert_eq!(a, b);
            let train: HashSet<_> = a.train.iter().collect();
            assert!(a.eval.iter().all(|e| !train.contains(e)));
            assert!(a.train.iter().all(|e| e.tokens.iter().all(|&t| t < 64)));
            spec.seed = 12;
            assert_ne!(generate_dataset(&spec).unwrap().checksum(), a.checksum());
        }
    }

    #[test]
    fn small_vocab_is_rejected() {
        let spec = TaskSpec::new(TaskKind::Copy, 32, 5, 0);
        assert!(matches!(generate_dataset(&spec), Err(Error::ConfigError(_))));
        let mut tiny = TaskSpec::new(TaskKind::ModularSum, 16, 1, 0);
        tiny.train_size = 8;
        assert!(matches!(generate_dataset(&tiny), Err(Error::ConfigError(_))));
    }

    #[test]
    fn hard_wired_model_scores_one() {
        // Zero blocks, one-hot embeddings and a head mapping each position
        // to its target make the model a lookup table.
        let spec = TaskSpec {
            train_size: 1,
            eval_size: 0,
            alphabet: 6,
            ..TaskSpec::new(TaskKind::Copy, 8, 1, 0)
        };
        let data = generate_dataset(&spec).unwrap();
        let ex = &data.train[0];
        let cfg = LmConfig::new(1, 8, 1, 8, 4, 0);
        let mut p = LmParams::init(&cfg).unwrap().zeros_like();
        p.final_norm.fill(1.0);
        p.blocks[0].attn_norm.fill(1.0);
        p.blocks[0].ffn_norm.fill(1.0);
        for t in 0..ex.input_len() {
            p.pos_emb.row_mut(t)[t] = 1.0;
            p.lm_head.row_mut(t)[ex.tokens[t + 1]] = 1.0;
        }
        assert_eq!(evaluate_accuracy(&p, &data.train).unwrap(), 1.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let mut spec = TaskSpec::new(TaskKind::Copy, 32, 1, 3);
        spec.alphabet = 30;
        spec.train_size = 0;
        spec.eval_size = 30;
        let data = generate_dataset(&spec).unwrap();
        // Repeat the 30 one-token problems to get a binomial sample.
        let eval: Vec<Example> = (0..20).flat_map(|_| data.eval.clone()).collect();
        let mut hits = 0.0;
        let n_models = 10;
        for seed in 0..n_models {
            let p = LmParams::init(&LmConfig::new(2, 16, 2, 32, 4, seed)).unwrap();
            hits += evaluate_accuracy(&p, &eval).unwrap();
            assert_eq!(
                evaluate_accuracy(&p, &eval).unwrap(),
                evaluate_accuracy(&p, &eval).unwrap()
            );
        }
        let mean = hits / n_models as f64;
        let p0 = 1.0 / 32.0;
        let sigma = (p0 * (1.0 - p0) / (n_models * 30) as f64).sqrt();
        assert!((mean - p0).abs() <= 3.0 * sigma + 1e-12, "{mean}");
    }
}
