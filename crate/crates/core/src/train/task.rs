//! Out-of-window associative recall.
//!
//! Each sequence hides `n_pairs` adjacent `(key, value)` token pairs in
//! random filler, then asks `n_queries` questions at the end: a query is a
//! key token, and the target at that position is the value that followed
//! the key earlier. Every source value sits at least `query_gap` tokens
//! before its query, so with `query_gap ≥ w + 2` no window-`w` attention
//! can reach it. The token after each query is filler, so answers never
//! appear in the input.
//!
//! The vocabulary is split into filler, key and value ranges: with `V`
//! tokens, `⌈V/8⌉` filler, `⌈V/8⌉` keys and the rest values.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Target marker for positions that carry no answer.
pub const IGNORE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallTask {
    pub seed: u64,
    pub seq_len: usize,
    pub vocab: usize,
    /// Window of the model under test.
    pub window: usize,
    pub n_pairs: usize,
    pub n_queries: usize,
    /// Minimum distance from a source value to its query.
    pub query_gap: usize,
}

/// Token ids and per-position targets for `batch` sequences, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// `(query position, source value position)` per sequence.
    pub links: Vec<Vec<(usize, usize)>>,
}

impl RecallBatch {
    pub fn answers(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

impl RecallTask {
    /// Single-window gap: sources just out of reach of one window.
    pub fn new(seed: u64, seq_len: usize, vocab: usize, window: usize) -> Self {
        Self {
            seed,
            seq_len,
            vocab,
            window,
            n_pairs: 1,
            n_queries: 1,
            query_gap: window + 2,
        }
    }

    /// Sets the gap beyond the combined reach of `local_layers` windows.
    pub fn beyond_receptive_field(mut self, local_layers: usize) -> Self {
        self.query_gap = local_layers * self.window + 2;
        self
    }

    pub fn n_filler(&self) -> usize {
        self.vocab.div_ceil(8)
    }

    pub fn key_range(&self) -> std::ops::Range<usize> {
        self.n_filler()..2 * self.n_filler()
    }

    pub fn value_range(&self) -> std::ops::Range<usize> {
        2 * self.n_filler()..self.vocab
    }

    /// Accuracy of uniform guessing among value tokens.
    pub fn chance(&self) -> f64 {
        1.0 / self.value_range().len() as f64
    }

    /// Positions before the query region available for pairs.
    fn pair_region(&self) -> Option<usize> {
        (self.seq_len + 1).checked_sub(2 * self.n_queries + self.query_gap)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.vocab < 16 {
            return bad(format!("vocabulary of {} is too small", self.vocab));
        }
        if self.n_pairs == 0 || self.n_queries == 0 {
            return bad("need at least one pair and one query".into());
        }
        if self.n_pairs > self.key_range().len() {
            return bad(format!("{} pairs need distinct keys but only {} exist", self.n_pairs, self.key_range().len()));
        }
        if self.query_gap < self.window + 2 {
            return bad(format!("query gap {} is inside the window {}", self.query_gap, self.window));
        }
        match self.pair_region() {
            Some(r) if r / 2 >= self.n_pairs => Ok(()),
            _ => bad(format!(
                "length {} cannot hold {} pairs, {} queries and a gap of {}",
                self.seq_len, self.n_pairs, self.n_queries, self.query_gap
            )),
        }
    }

    /// Same task at another length (gap and counts unchanged).
    pub fn with_len(&self, seq_len: usize) -> Self {
        Self { seq_len, ..self.clone() }
    }

    fn sequence(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, Vec<(usize, usize)>) {
        let l = self.seq_len;
        let filler = 0..self.n_filler();
        let mut tokens: Vec<usize> = (0..l).map(|_| rng.gen_range(filler.clone())).collect();
        let mut targets = vec![IGNORE; l];

        let region = self.pair_region().expect("validated");
        let mut slots: Vec<usize> = (0..region / 2).collect();
        slots.shuffle(rng);
        let mut keys: Vec<usize> = self.key_range().collect();
        keys.shuffle(rng);
        let values = self.value_range();
        let pairs: Vec<(usize, usize, usize)> = slots[..self.n_pairs]
            .iter()
            .zip(&keys)
            .map(|(&slot, &key)| (2 * slot, key, rng.gen_range(values.clone())))
            .collect();
        for &(pos, key, value) in &pairs {
            tokens[pos] = key;
            tokens[pos + 1] = value;
        }

        let q0 = l - 2 * self.n_queries;
        let mut links = Vec::with_capacity(self.n_queries);
        for i in 0..self.n_queries {
            let q = q0 + 2 * i;
            let (pos, key, value) = pairs[rng.gen_range(0..pairs.len())];
            tokens[q] = key;
            targets[q] = value;
            links.push((q, pos + 1));
        }
        (tokens, targets, links)
    }

    /// Batch `index` of stream `stream`; deterministic in `(seed, stream,
    /// index)` and independent of thread count.
    pub fn batch(&self, stream: u64, index: u64, batch: usize) -> Result<RecallBatch> {
        self.validate()?;
        let seqs: Vec<_> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
                rng.set_word_pos(b as u128 * (1 << 24));
                self.sequence(&mut rng)
            })
            .collect();
        let mut out = RecallBatch {
            batch,
            seq_len: self.seq_len,
            tokens: Vec::with_capacity(batch * self.seq_len),
            targets: Vec::with_capacity(batch * self.seq_len),
            links: Vec::with_capacity(batch),
        };
        for (t, g, l) in seqs {
            out.tokens.extend(t);
            out.targets.extend(g);
            out.links.push(l);
        }
        Ok(out)
    }
}

/// Convenience for `task.batch(0, 0, batch)`.
pub fn gen_recall_batch(task: &RecallTask, batch: usize) -> Result<RecallBatch> {
    task.batch(0, 0, batch)
}
