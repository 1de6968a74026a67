use rand::seq::SliceRandom;

use super::tokenizer::{CLS, PAD};
use crate::encoder::SequenceInput;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `max label + 1` when every example is labeled.
    pub fn num_labels(&self) -> Option<usize> {
        let labels: Option<Vec<usize>> = self.examples.iter().map(|e| e.label).collect();
        labels.and_then(|l| l.into_iter().max()).map(|m| m + 1)
    }

    /// Deterministic split: the first `round(fraction · len)` examples after
    /// a seeded shuffle become the second part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::contract(format!("split fraction must lie in [0, 1), got {fraction}")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seeds::rng(seed, u64::MAX));
        let held = (fraction * self.len() as f64).round() as usize;
        let pick = |idx: &[usize]| Dataset::new(idx.iter().map(|&i| self.examples[i].clone()).collect());
        Ok((pick(&order[held..]), pick(&order[..held])))
    }
}

/// Fixed-length rows with key-validity masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    /// False exactly at padding positions.
    pub mask: Vec<Vec<bool>>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn inputs(&self) -> Vec<SequenceInput<'_>> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .map(|(t, m)| SequenceInput { tokens: t, valid: m })
            .collect()
    }

    /// Pads/truncates each example to `seq_len`. An empty example becomes a
    /// lone `[CLS]`, so no row is ever fully masked.
    pub fn from_examples(examples: &[&Example], seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::contract("seq_len must be >= 1"));
        }
        let mut tokens = Vec::with_capacity(examples.len());
        let mut mask = Vec::with_capacity(examples.len());
        for e in examples {
            let mut row: Vec<usize> = if e.tokens.is_empty() {
                vec![CLS]
            } else {
                e.tokens.iter().take(seq_len).copied().collect()
            };
            let valid = row.len();
            row.resize(seq_len, PAD);
            mask.push((0..seq_len).map(|i| i < valid).collect());
            tokens.push(row);
        }
        let labels: Option<Vec<usize>> = examples.iter().map(|e| e.label).collect();
        Ok(Self { tokens, mask, labels })
    }
}

/// One epoch of batches in a seeded order. Identical arguments give an
/// identical stream; the final batch holds the remainder.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, seq_len: usize, seed: u64) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        return Err(Error::input("dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seeds::rng(seed, 0));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let ex: Vec<&Example> = chunk.iter().map(|&i| &dataset.examples[i]).collect();
            Batch::from_examples(&ex, seq_len)
        })
        .collect()
}

/// Batches for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_batches(
    dataset: &Dataset,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    batch_iter(dataset, batch_size, seq_len, seeds::derive(seed, epoch as u64))
}

/// Cuts a token stream into `[CLS]`-prefixed windows of `window` tokens
/// (including `[CLS]`). A trailing partial window is kept.
pub fn chunk_stream(ids: &[usize], window: usize) -> Result<Dataset> {
    if window < 2 {
        return Err(Error::contract("window must be >= 2"));
    }
    Ok(Dataset::new(
        ids.chunks(window - 1)
            .map(|c| Example {
                tokens: std::iter::once(CLS).chain(c.iter().copied()).collect(),
                label: None,
            })
            .collect(),
    ))
}
