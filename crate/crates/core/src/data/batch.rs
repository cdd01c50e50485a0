use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SessionDataset, Sequence};
use crate::error::{Error, Result};

/// Left-padded mini-batch of prefixes.
///
/// `items` is `size × width`, row-major, padded on the left with `pad`
/// (= |V|). `width` is the longest prefix in the batch, never above
/// `max_len`. Positions are anchored at the right edge: column `c` uses
/// position `max_len - width + c`, so a batch padded to any width encodes the
/// same as one padded to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<u32>,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<u32>,
    /// True at positions holding a hot item.
    pub hot: Vec<bool>,
    /// True at positions holding a cold item.
    pub cold: Vec<bool>,
    pub pad: u32,
    pub max_len: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[&Sequence], hot_flags: &[bool], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let pad = hot_flags.len() as u32;
        let lengths: Vec<usize> = seqs.iter().map(|s| s.prefix.len().min(max_len)).collect();
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::Data("empty prefix in batch".into()));
        }
        let width = *lengths.iter().max().expect("non-empty");
        let mut items = vec![pad; seqs.len() * width];
        let mut hot = vec![false; items.len()];
        let mut cold = vec![false; items.len()];
        for (b, s) in seqs.iter().enumerate() {
            let recent = &s.prefix[s.prefix.len() - lengths[b]..];
            let row = b * width + (width - lengths[b]);
            for (t, &item) in recent.iter().enumerate() {
                if item >= pad || s.label >= pad {
                    return Err(Error::Index {
                        index: item.max(s.label) as usize,
                        bound: pad as usize,
                    });
                }
                items[row + t] = item;
                hot[row + t] = hot_flags[item as usize];
                cold[row + t] = !hot_flags[item as usize];
            }
        }
        Ok(Batch {
            items,
            width,
            lengths,
            labels: seqs.iter().map(|s| s.label).collect(),
            hot,
            cold,
            pad,
            max_len,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// True at non-pad positions.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.items.iter().map(|&i| i != self.pad).collect()
    }

    /// Position-table row used by column `c`.
    pub fn position_of(&self, c: usize) -> usize {
        self.max_len - self.width + c
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// One epoch of shuffled training batches; the last partial batch is kept.
pub fn make_batches(dataset: &SessionDataset, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<&Sequence> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            Batch::from_sequences(&seqs, &dataset.vocab.hot, dataset.max_len)
        })
        .collect()
}

/// Batches in input order, for evaluation.
pub fn eval_batches(
    seqs: &[Sequence],
    hot_flags: &[bool],
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    seqs.chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Sequence> = chunk.iter().collect();
            Batch::from_sequences(&refs, hot_flags, max_len)
        })
        .collect()
}
