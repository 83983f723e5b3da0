//! Paired labeled/unlabeled mini-batch sampling.
//!
//! Each step draws `batch_size` indices from the labeled pool and, when one
//! exists, `batch_size` indices from the unlabeled pool. Every pool is
//! reshuffled at the start of each epoch; an epoch covers the larger pool
//! once, with the smaller pool wrapping around as needed. The shuffle for a
//! given epoch depends only on `(seed, epoch)`, so a sampler re-created at an
//! epoch boundary replays the identical batch sequence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Indices of one paired mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub labeled: Vec<usize>,
    /// Empty when the manifest holds no unlabeled images.
    pub unlabeled: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PairSampler {
    labeled_len: usize,
    unlabeled_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    step_in_epoch: usize,
    labeled_order: Vec<usize>,
    unlabeled_order: Vec<usize>,
}

fn mix(seed: u64, epoch: u64, tag: u64) -> u64 {
    // splitmix64 over the packed inputs, so nearby (seed, epoch) pairs do not
    // produce correlated streams
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(tag);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-stream RNG for `(seed, epoch, tag)`.
pub(crate) fn stream_rng(seed: u64, epoch: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch, tag))
}

impl PairSampler {
    pub fn new(labeled_len: usize, unlabeled_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if labeled_len == 0 {
            return Err(Error::InvalidArgument(
                "labeled pool is empty: the supervised loss is undefined".into(),
            ));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let mut sampler = PairSampler {
            labeled_len,
            unlabeled_len,
            batch_size,
            seed,
            epoch: 0,
            step_in_epoch: 0,
            labeled_order: Vec::new(),
            unlabeled_order: Vec::new(),
        };
        sampler.reshuffle();
        Ok(sampler)
    }

    /// Steps needed to cover the larger pool once.
    pub fn steps_per_epoch(&self) -> usize {
        let dominant = self.labeled_len.max(self.unlabeled_len);
        dominant.div_ceil(self.batch_size)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Jump to the start of `epoch`, replaying its shuffle.
    pub fn seek_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.step_in_epoch = 0;
        self.reshuffle();
    }

    fn reshuffle(&mut self) {
        let mut rng = stream_rng(self.seed, self.epoch as u64, 0x5a);
        self.labeled_order = (0..self.labeled_len).collect();
        self.labeled_order.shuffle(&mut rng);
        self.unlabeled_order = (0..self.unlabeled_len).collect();
        self.unlabeled_order.shuffle(&mut rng);
    }

    /// Draw the next paired batch, rolling into the next epoch when the
    /// current one is exhausted.
    pub fn next_pair(&mut self) -> PairBatch {
        if self.step_in_epoch >= self.steps_per_epoch() {
            self.seek_epoch(self.epoch + 1);
        }
        let start = self.step_in_epoch * self.batch_size;
        let labeled = (0..self.batch_size)
            .map(|j| self.labeled_order[(start + j) % self.labeled_len])
            .collect();
        let unlabeled = if self.unlabeled_len == 0 {
            Vec::new()
        } else {
            (0..self.batch_size)
                .map(|j| self.unlabeled_order[(start + j) % self.unlabeled_len])
                .collect()
        };
        self.step_in_epoch += 1;
        PairBatch { labeled, unlabeled }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_batch_size_from_each_pool() {
        let mut s = PairSampler::new(20, 80, 16, 3).unwrap();
        let b = s.next_pair();
        assert_eq!(b.labeled.len(), 16);
        assert_eq!(b.unlabeled.len(), 16);
        assert!(b.labeled.iter().all(|&i| i < 20));
        assert!(b.unlabeled.iter().all(|&i| i < 80));
    }

    #[test]
    fn single_sample_pools_repeat() {
        let mut s = PairSampler::new(1, 1, 1, 0).unwrap();
        for _ in 0..5 {
            let b = s.next_pair();
            assert_eq!(b.labeled, vec![0]);
            assert_eq!(b.unlabeled, vec![0]);
        }
    }

    #[test]
    fn fixed_seed_replays_identically() {
        let mut a = PairSampler::new(20, 80, 16, 9).unwrap();
        let mut b = PairSampler::new(20, 80, 16, 9).unwrap();
        for _ in 0..3 * a.steps_per_epoch() {
            assert_eq!(a.next_pair(), b.next_pair());
        }
    }

    #[test]
    fn epoch_covers_dominant_pool_exactly_once() {
        let mut s = PairSampler::new(4, 10, 2, 1).unwrap();
        assert_eq!(s.steps_per_epoch(), 5);
        let mut seen = vec![0usize; 10];
        for _ in 0..5 {
            for idx in s.next_pair().unlabeled {
                seen[idx] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "{seen:?}");
    }

    #[test]
    fn seek_epoch_matches_continuous_run() {
        let mut cont = PairSampler::new(6, 13, 4, 5).unwrap();
        let steps = cont.steps_per_epoch();
        for _ in 0..2 * steps {
            cont.next_pair();
        }
        let continued: Vec<PairBatch> = (0..steps).map(|_| cont.next_pair()).collect();

        let mut seeked = PairSampler::new(6, 13, 4, 5).unwrap();
        seeked.seek_epoch(2);
        let replayed: Vec<PairBatch> = (0..steps).map(|_| seeked.next_pair()).collect();
        assert_eq!(continued, replayed);
    }

    #[test]
    fn empty_labeled_pool_is_an_error() {
        assert!(PairSampler::new(0, 10, 4, 0).is_err());
    }

    #[test]
    fn no_unlabeled_pool_yields_empty_unlabeled_batches() {
        let mut s = PairSampler::new(8, 0, 4, 2).unwrap();
        assert_eq!(s.steps_per_epoch(), 2);
        assert!(s.next_pair().unlabeled.is_empty());
    }
}
