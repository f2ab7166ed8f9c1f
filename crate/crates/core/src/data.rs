//! Token sequences and the batches fed to the toy models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training sequence. Tokens from `answer_start` onward are the answer;
/// the model is supervised on predicting exactly those tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub answer_start: usize,
}

impl Example {
    /// Number of input positions (the final token is never an input).
    pub fn input_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.answer_start..]
    }
}

/// A rectangular batch of teacher-forced sequences, flattened row-major as
/// `batch × seq`. Row `b * seq_len + t` of every trace matrix is position
/// `t` of sequence `b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub supervised_mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(
        batch_size: usize,
        seq_len: usize,
        input_ids: Vec<usize>,
        target_ids: Vec<usize>,
        supervised_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = batch_size * seq_len;
        if input_ids.len() != n || target_ids.len() != n || supervised_mask.len() != n {
            return Err(Error::shape(format!(
                "batch {batch_size}x{seq_len} needs {n} ids, got {}/{}/{}",
                input_ids.len(),
                target_ids.len(),
                supervised_mask.len()
            )));
        }
        Ok(TokenBatch {
            batch_size,
            seq_len,
            input_ids,
            target_ids,
            supervised_mask,
        })
    }

    /// Teacher-forced batch: inputs are `tokens[..n-1]`, targets `tokens[1..]`,
    /// and a position is supervised when its target is an answer token.
    pub fn from_examples<'a, I>(examples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        let mut batch_size = 0;
        let mut seq_len = None;
        let mut input_ids = Vec::new();
        let mut target_ids = Vec::new();
        let mut mask = Vec::new();
        for ex in examples {
            let len = ex.input_len();
            if len == 0 {
                return Err(Error::shape("example needs at least two tokens"));
            }
            match seq_len {
                None => seq_len = Some(len),
                Some(l) if l != len => {
                    return Err(Error::shape(format!(
                        "examples of length {l} and {len} cannot share a batch"
                    )))
                }
                _ => {}
            }
            for t in 0..len {
                input_ids.push(ex.tokens[t]);
                target_ids.push(ex.tokens[t + 1]);
                mask.push(t + 1 >= ex.answer_start);
            }
            batch_size += 1;
        }
        let seq_len = seq_len.ok_or_else(|| Error::shape("empty batch"))?;
        TokenBatch::new(batch_size, seq_len, input_ids, target_ids, mask)
    }

    pub fn n_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn supervised_rows(&self) -> Vec<usize> {
        (0..self.n_tokens()).filter(|&i| self.supervised_mask[i]).collect()
    }

    pub fn n_supervised(&self) -> usize {
        self.supervised_mask.iter().filter(|&&m| m).count()
    }

    /// The last supervised row of each sequence, if it has one.
    pub fn last_supervised_rows(&self) -> Vec<Option<usize>> {
        (0..self.batch_size)
            .map(|b| {
                (0..self.seq_len)
                    .rev()
                    .map(|t| b * self.seq_len + t)
                    .find(|&i| self.supervised_mask[i])
            })
            .collect()
    }

    pub fn validate(&self, vocab_size: usize, max_seq: usize) -> Result<()> {
        if self.seq_len > max_seq {
            return Err(Error::shape(format!(
                "sequence length {} exceeds max_seq {max_seq}",
                self.seq_len
            )));
        }
        for &t in self.input_ids.iter().chain(&self.target_ids) {
            if t >= vocab_size {
                return Err(Error::TokenRangeError { token: t, vocab_size });
            }
        }
        Ok(())
    }
}

/// Deterministic epoch-shuffled mini-batch indices.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            n,
            batch_size: batch_size.clamp(1, n.max(1)),
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(tokens: &[usize], answer_start: usize) -> Example {
        Example {
            tokens: tokens.to_vec(),
            answer_start,
        }
    }

    #[test]
    fn teacher_forcing_layout() {
        let b = TokenBatch::from_examples(&[ex(&[0, 5, 6, 1, 5, 6], 4)]).unwrap();
        assert_eq!(b.input_ids, vec![0, 5, 6, 1, 5]);
        assert_eq!(b.target_ids, vec![5, 6, 1, 5, 6]);
        assert_eq!(b.supervised_mask, vec![false, false, false, true, true]);
        assert_eq!(b.last_supervised_rows(), vec![Some(4)]);
    }

    #[test]
    fn ragged_batches_are_rejected() {
        let r = TokenBatch::from_examples(&[ex(&[0, 1, 2], 2), ex(&[0, 1], 1)]);
        assert!(r.is_err());
    }

    #[test]
    fn out_of_vocab_token_is_reported() {
        let b = TokenBatch::from_examples(&[ex(&[0, 9, 2], 2)]).unwrap();
        assert!(matches!(
            b.validate(8, 16),
            Err(Error::TokenRangeError { token: 9, .. })
        ));
    }

    #[test]
    fn sampler_covers_every_index_per_epoch() {
        let mut s = BatchSampler::new(10, 4, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).take(10).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
