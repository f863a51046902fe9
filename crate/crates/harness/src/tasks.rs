//! Synthetic algorithmic tasks with exact-match answers.

use l2d_core::data::{LmSequence, TokenId};
use l2d_core::{L2dError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BOS: TokenId = 0;
pub const SEP: TokenId = 1;
/// First symbol token; the four task markers sit between `SEP` and here.
pub const FIRST_SYMBOL: TokenId = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularSum,
    KeyedRecall,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::ModularSum,
        TaskKind::KeyedRecall,
    ];

    /// Guidance class label, 1-based.
    pub fn class_id(self) -> usize {
        match self {
            TaskKind::Copy => 1,
            TaskKind::Reverse => 2,
            TaskKind::ModularSum => 3,
            TaskKind::KeyedRecall => 4,
        }
    }

    pub fn marker(self) -> TokenId {
        1 + self.class_id() as TokenId
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularSum => "modular_sum",
            TaskKind::KeyedRecall => "keyed_recall",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| L2dError::Config(format!("unknown task '{s}'")))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Symbols in the vocabulary after the special tokens.
    pub n_symbols: usize,
    /// Payload length for copy/reverse, prompt body length for modular_sum.
    pub payload_len: usize,
    /// Summed operands in modular_sum.
    pub n_operands: usize,
    /// Key/value pairs in keyed_recall.
    pub n_pairs: usize,
    pub prime: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_val: 256,
            n_test: 256,
            n_symbols: 16,
            payload_len: 5,
            n_operands: 3,
            n_pairs: 4,
            prime: 7,
        }
    }
}

impl TaskSizes {
    pub fn vocab_size(&self) -> usize {
        FIRST_SYMBOL as usize + self.n_symbols
    }

    pub fn validate(&self, kind: TaskKind) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(L2dError::Config("split sizes must be positive".into()));
        }
        if self.n_symbols == 0 || self.payload_len == 0 {
            return Err(L2dError::Config("n_symbols and payload_len must be positive".into()));
        }
        match kind {
            TaskKind::Copy | TaskKind::Reverse => Ok(()),
            TaskKind::ModularSum => {
                if self.prime < 2 || self.n_symbols <= self.prime {
                    return Err(L2dError::Config(format!(
                        "modular_sum needs more than prime={} symbols to leave room for distractors, got {}",
                        self.prime, self.n_symbols
                    )));
                }
                if self.n_operands == 0 || self.n_operands > self.payload_len {
                    return Err(L2dError::Config("n_operands must be in 1..=payload_len".into()));
                }
                Ok(())
            }
            TaskKind::KeyedRecall => {
                if self.n_pairs == 0 || self.n_symbols < 2 * self.n_pairs {
                    return Err(L2dError::Config(format!(
                        "keyed_recall with {} pairs needs at least {} symbols, got {}",
                        self.n_pairs,
                        2 * self.n_pairs,
                        self.n_symbols
                    )));
                }
                Ok(())
            }
        }
    }

    /// The longest prompt plus answer any task produces.
    pub fn max_len(&self) -> usize {
        let copy = 3 + 2 * self.payload_len;
        let recall = 4 + 2 * self.n_pairs + 1;
        copy.max(recall).max(3 + self.payload_len + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub class_id: usize,
}

impl Example {
    /// Prompt and answer as one sequence whose targets are the answer tokens.
    pub fn to_sequence(&self) -> LmSequence {
        let mut tokens = self.prompt.clone();
        tokens.extend_from_slice(&self.answer);
        let mask = (0..tokens.len()).map(|k| k >= self.prompt.len()).collect();
        LmSequence {
            tokens,
            target_mask: Some(mask),
            class_id: self.class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub sizes: TaskSizes,
    pub seed: u64,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn sym(i: usize) -> TokenId {
    FIRST_SYMBOL + i as TokenId
}

fn sym_index(t: TokenId) -> Option<usize> {
    t.checked_sub(FIRST_SYMBOL).map(|v| v as usize)
}

/// Split assignment from a seeded hash of the prompt: 5% validation,
/// 5% test, the rest training. Equal prompts always share a split.
pub fn split_of(seed: u64, prompt: &[TokenId]) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed
        .to_le_bytes()
        .into_iter()
        .chain(prompt.iter().flat_map(|t| t.to_le_bytes()))
    {
        h = (h ^ byte as u64).wrapping_mul(0x0100_0000_01b3);
    }
    match h % 100 {
        0..5 => Split::Val,
        5..10 => Split::Test,
        _ => Split::Train,
    }
}

fn draw_prompt<R: Rng>(kind: TaskKind, s: &TaskSizes, rng: &mut R) -> Vec<TokenId> {
    let mut p = vec![BOS, kind.marker()];
    match kind {
        TaskKind::Copy | TaskKind::Reverse => {
            p.extend((0..s.payload_len).map(|_| sym(rng.random_range(0..s.n_symbols))));
            p.push(SEP);
        }
        TaskKind::ModularSum => {
            let mut body: Vec<TokenId> = (0..s.n_operands).map(|_| sym(rng.random_range(0..s.prime))).collect();
            body.extend((s.n_operands..s.payload_len).map(|_| sym(rng.random_range(s.prime..s.n_symbols))));
            body.shuffle(rng);
            p.extend(body);
            p.push(SEP);
        }
        TaskKind::KeyedRecall => {
            let half = s.n_symbols / 2;
            let mut keys: Vec<usize> = (0..half).collect();
            keys.shuffle(rng);
            for &k in &keys[..s.n_pairs] {
                p.push(sym(k));
                p.push(sym(half + rng.random_range(0..s.n_symbols - half)));
            }
            p.push(SEP);
            p.push(sym(keys[rng.random_range(0..s.n_pairs)]));
        }
    }
    p
}

/// The answer implied by a prompt, or `None` when the prompt is malformed.
pub fn solve(kind: TaskKind, sizes: &TaskSizes, prompt: &[TokenId]) -> Option<Vec<TokenId>> {
    if prompt.len() < 3 || prompt[0] != BOS || prompt[1] != kind.marker() {
        return None;
    }
    let body = &prompt[2..];
    match kind {
        TaskKind::Copy | TaskKind::Reverse => {
            let (payload, last) = body.split_at(body.len() - 1);
            if last != [SEP] {
                return None;
            }
            let mut out = payload.to_vec();
            if kind == TaskKind::Reverse {
                out.reverse();
            }
            Some(out)
        }
        TaskKind::ModularSum => {
            let (payload, last) = body.split_at(body.len() - 1);
            if last != [SEP] {
                return None;
            }
            let sum: usize = payload
                .iter()
                .filter_map(|&t| sym_index(t))
                .filter(|&i| i < sizes.prime)
                .sum();
            Some(vec![sym(sum % sizes.prime)])
        }
        TaskKind::KeyedRecall => {
            let n = body.len();
            if n < 4 || body[n - 2] != SEP {
                return None;
            }
            let query = body[n - 1];
            body[..n - 2]
                .chunks_exact(2)
                .find(|kv| kv[0] == query)
                .map(|kv| vec![kv[1]])
        }
    }
}

/// Builds a deterministic dataset for `kind`.
pub fn make_task(kind: TaskKind, sizes: &TaskSizes, seed: u64) -> Result<Task> {
    sizes.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind.class_id() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut task = Task {
        kind,
        sizes: sizes.clone(),
        seed,
        train: Vec::with_capacity(sizes.n_train),
        val: Vec::with_capacity(sizes.n_val),
        test: Vec::with_capacity(sizes.n_test),
    };
    let budget = 50 * (sizes.n_train + sizes.n_val + sizes.n_test) + 10_000;
    for _ in 0..budget {
        if task.train.len() == sizes.n_train && task.val.len() == sizes.n_val && task.test.len() == sizes.n_test {
            return Ok(task);
        }
        let prompt = draw_prompt(kind, sizes, &mut rng);
        let (split, cap) = match split_of(seed, &prompt) {
            Split::Train => (&mut task.train, sizes.n_train),
            Split::Val => (&mut task.val, sizes.n_val),
            Split::Test => (&mut task.test, sizes.n_test),
        };
        if split.len() < cap {
            let answer = solve(kind, sizes, &prompt).expect("generated prompts are well formed");
            split.push(Example {
                prompt,
                answer,
                class_id: kind.class_id(),
            });
        }
    }
    Err(L2dError::Config(format!(
        "could not fill the {kind} splits; the prompt space is too small for the requested sizes"
    )))
}

impl Task {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sequences(&self, split: Split) -> Vec<LmSequence> {
        self.split(split).iter().map(Example::to_sequence).collect()
    }
}

/// Exact match on answer tokens.
pub fn exact_match(predicted: &[TokenId], answer: &[TokenId]) -> bool {
    predicted == answer
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_sum_example() {
        let s = TaskSizes::default();
        let prompt = [BOS, TaskKind::ModularSum.marker(), sym(3), sym(9), sym(5), sym(12), SEP];
        assert_eq!(solve(TaskKind::ModularSum, &s, &prompt), Some(vec![sym(1)]));
    }
}
