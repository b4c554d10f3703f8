use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, DatasetSplit, DomainSample};

/// Permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA7C, epoch]));
    order.shuffle(&mut rng);
    order
}

/// One shuffled pass over a split, final partial batch included.
pub struct BatchIter<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<&'a DomainSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.split.samples[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

/// # Panics
/// If `batch_size` is zero.
pub fn iterate_batches(split: &DatasetSplit, batch_size: usize, seed: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    BatchIter {
        split,
        order: epoch_order(split.len(), seed, 0),
        batch_size,
        pos: 0,
    }
}

/// Sample indices for global step `iter` when batches are drawn
/// epoch-by-epoch; pure in its arguments, so resuming needs no RNG state.
/// Batches never straddle epochs: the tail of each epoch forms a short batch.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, iter: u64) -> Vec<usize> {
    assert!(n >= 1 && batch_size >= 1);
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = iter / per_epoch;
    let start = (iter % per_epoch) as usize * batch_size;
    let order = epoch_order(n, seed, epoch);
    order[start..(start + batch_size).min(n)].to_vec()
}
