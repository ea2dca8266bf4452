use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A node's exclusive slice of the training rows, popped as a queue.
///
/// Each pass over the shard uses a fresh shuffle drawn from the caller's RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub owner: usize,
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epochs: u64,
}

impl Shard {
    pub fn new(owner: usize, indices: Vec<usize>) -> Self {
        Shard {
            owner,
            order: indices.clone(),
            indices,
            // forces a shuffle on the first pop
            cursor: usize::MAX,
            epochs: 0,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Completed or started passes over the shard.
    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    /// Pops `m` row indices, wrapping into a reshuffled pass when the current one runs out.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, m: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        if self.indices.is_empty() {
            return out;
        }
        while out.len() < m {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
                self.epochs += 1;
            }
            let take = (m - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Seeded permutation of `0..n` dealt round-robin into `k` shards.
pub fn partition(n: usize, k: usize, seed: u64) -> Result<Vec<Shard>> {
    if k == 0 {
        return Err(Error::invalid("partition needs at least one shard"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot split {n} rows into {k} shards")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut buckets = vec![Vec::with_capacity(n / k + 1); k];
    for (i, idx) in perm.into_iter().enumerate() {
        buckets[i % k].push(idx);
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(owner, idx)| Shard::new(owner, idx))
        .collect())
}
