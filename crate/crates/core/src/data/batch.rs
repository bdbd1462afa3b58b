//! Seeded mini-batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Drops the last partial batch.
    Train,
    /// Keeps the last partial batch.
    Eval,
}

/// Stream seed for a given epoch; distinct epochs get unrelated orders.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Split `ids` into batches for one epoch. With `shuffle` the order is a
/// permutation drawn from `(seed, epoch)`.
pub fn batch_iter<T: Clone>(
    ids: &[T],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
    mode: BatchMode,
) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if batch_size > ids.len() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} exceeds split size {}",
            ids.len()
        )));
    }
    let mut order: Vec<T> = ids.to_vec();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        order.shuffle(&mut rng);
    }
    let mut batches: Vec<Vec<T>> = order.chunks(batch_size).map(<[T]>::to_vec).collect();
    if mode == BatchMode::Train && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    Ok(batches)
}
