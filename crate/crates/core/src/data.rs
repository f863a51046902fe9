//! Token sequences as consumed by the training loops.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// A training or evaluation sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmSequence {
    pub tokens: Vec<TokenId>,
    /// `target_mask[k]` marks position `k` (k >= 1) as a prediction target.
    /// `None` means every position after the first is a target.
    pub target_mask: Option<Vec<bool>>,
    /// Class label for guidance; 0 is the null class.
    pub class_id: usize,
}

impl LmSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            target_mask: None,
            class_id: 0,
        }
    }

    pub fn is_target(&self, k: usize) -> bool {
        k >= 1
            && match &self.target_mask {
                Some(m) => m.get(k).copied().unwrap_or(false),
                None => true,
            }
    }

    /// Loss weight for each next-token target `1..len`.
    pub fn target_weights(&self) -> Vec<f64> {
        (1..self.tokens.len())
            .map(|k| if self.is_target(k) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Epoch-based shuffled minibatch sampler.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            batch_size: batch_size.max(1),
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size && !self.order.is_empty() {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}
