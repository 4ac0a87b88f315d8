//! Training sequences and batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::{TokenId, EOS, PAD};

/// One fixed-length training row: `seq_len + 1` tokens and a `seq_len` mask
/// that is true where the next-token loss applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn seq_len(&self) -> usize {
        self.loss_mask.len()
    }
}

/// `[batch × seq_len]` inputs with targets shifted by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a TrainingExample>) -> Self {
        let mut b = Batch {
            batch_size: 0,
            seq_len: 0,
            inputs: Vec::new(),
            targets: Vec::new(),
            loss_mask: Vec::new(),
        };
        for ex in examples {
            let t = ex.seq_len();
            if b.batch_size == 0 {
                b.seq_len = t;
            }
            assert_eq!(t, b.seq_len, "examples in a batch share seq_len");
            b.inputs.extend_from_slice(&ex.tokens[..t]);
            b.targets.extend_from_slice(&ex.tokens[1..]);
            b.loss_mask.extend_from_slice(&ex.loss_mask);
            b.batch_size += 1;
        }
        b
    }
}

/// Concatenates documents with EOS separators and cuts the stream into rows
/// of `seq_len + 1` tokens, consecutive rows sharing one token so every
/// position is a target exactly once. The tail row is PAD-filled and masked.
pub fn pack_documents(docs: &[Vec<TokenId>], seq_len: usize) -> Vec<TrainingExample> {
    assert!(seq_len > 0);
    let mut stream = Vec::new();
    for doc in docs {
        stream.extend_from_slice(doc);
        stream.push(EOS);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq_len + 1).min(stream.len());
        let mut tokens = stream[start..end].to_vec();
        let real_targets = tokens.len() - 1;
        tokens.resize(seq_len + 1, PAD);
        let loss_mask = (0..seq_len).map(|i| i < real_targets).collect();
        out.push(TrainingExample { tokens, loss_mask });
        start += seq_len;
    }
    out
}

/// A prompt/target pair; loss applies only to the target tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftSequence {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SftSequence {
    pub fn len(&self) -> usize {
        self.prompt.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `None` when the pair does not fit in `seq_len + 1` tokens.
    pub fn to_example(&self, seq_len: usize) -> Option<TrainingExample> {
        if self.len() > seq_len + 1 || self.prompt.is_empty() || self.target.is_empty() {
            return None;
        }
        let mut tokens = self.prompt.clone();
        tokens.extend_from_slice(&self.target);
        let used = tokens.len();
        tokens.resize(seq_len + 1, PAD);
        // Input position i predicts token i + 1.
        let first_target = self.prompt.len() - 1;
        let loss_mask = (0..seq_len).map(|i| i >= first_target && i + 1 < used).collect();
        Some(TrainingExample { tokens, loss_mask })
    }
}

/// Converts pairs to rows; returns the rows and how many pairs were too long.
pub fn sft_examples(seqs: &[SftSequence], seq_len: usize) -> (Vec<TrainingExample>, usize) {
    let mut skipped = 0;
    let rows = seqs
        .iter()
        .filter_map(|s| {
            let r = s.to_example(seq_len);
            if r.is_none() {
                skipped += 1;
            }
            r
        })
        .collect();
    (rows, skipped)
}

/// Endless stream of example indices: each epoch holds every index
/// `repeat_factor` times, reshuffled from a seeded generator.
pub struct EpochSampler {
    n: usize,
    repeat_factor: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub epoch: usize,
}

impl EpochSampler {
    pub fn new(n: usize, repeat_factor: usize, seed: u64) -> Self {
        assert!(n > 0 && repeat_factor > 0);
        Self {
            n,
            repeat_factor,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        }
    }

    fn refill(&mut self) {
        self.order = (0..self.repeat_factor).flat_map(|_| 0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.cursor == self.order.len() {
                if !self.order.is_empty() {
                    self.epoch += 1;
                }
                self.refill();
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
    use crate::tokenizer::{BOS, SEP};

    #[test]
    fn packing_shifts_targets() {
        let docs = vec![vec![10, 11, 12], vec![20, 21]];
        let rows = pack_documents(&docs, 4);
        // stream: 10 11 12 EOS 20 21 EOS
        assert_eq!(rows[0].tokens, vec![10, 11, 12, EOS, 20]);
        assert_eq!(rows[1].tokens, vec![20, 21, EOS, PAD, PAD]);
        assert_eq!(rows[1].loss_mask, vec![true, true, false, false]);
        let b = Batch::from_examples(&rows);
        assert_eq!(b.batch_size, 2);
        for i in 0..b.batch_size {
            for t in 0..b.seq_len - 1 {
                assert_eq!(b.targets[i * 4 + t], b.inputs[i * 4 + t + 1]);
            }
        }
        assert!(b.targets.iter().zip(&b.loss_mask).all(|(&t, &m)| !m || t != PAD));
    }

    #[test]
    fn sft_mask_covers_target_only() {
        let s = SftSequence {
            prompt: vec![BOS, 7, 8, SEP],
            target: vec![9, EOS],
        };
        let ex = s.to_example(8).unwrap();
        assert_eq!(ex.tokens, vec![BOS, 7, 8, SEP, 9, EOS, PAD, PAD, PAD]);
        // Positions 3 (SEP→9) and 4 (9→EOS) carry loss.
        assert_eq!(ex.loss_mask, vec![false, false, false, true, true, false, false, false]);
        assert!(s.to_example(4).is_none());
        let (rows, skipped) = sft_examples(&[s.clone(), s], 4);
        assert!(rows.is_empty());
        assert_eq!(skipped, 2);
    }

    #[test]
    fn sampler_visits_each_index_repeat_times_per_epoch() {
        let mut s = EpochSampler::new(5, 3, 11);
        let first: Vec<usize> = (0..15).flat_map(|_| s.next_batch(1)).collect();
        for i in 0..5 {
            assert_eq!(first.iter().filter(|&&x| x == i).count(), 3);
        }
        let mut again = EpochSampler::new(5, 3, 11);
        assert_eq!(again.next_batch(15), first);
        let second = s.next_batch(15);
        assert_ne!(second, first);
        assert_eq!(s.epoch, 1);
    }
}
