//! Seeded randomness.
//!
//! Backed by ChaCha8, a counter-based stream cipher generator. A seed keys the
//! generator through `SeedableRng::seed_from_u64`; independent substreams for
//! the same seed are selected with ChaCha's 64-bit stream id
//! (`Rng::substream(seed, key)`), so drawing from one substream never shifts
//! another. The integer stream is bit-exact across platforms.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known substream keys.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const THRESHOLD: u64 = 3;
    pub const DATA: u64 = 4;
}

#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn substream(seed: u64, key: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(key);
        Self(inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }

    /// `m` distinct indices from `0..n`, returned in increasing order.
    pub fn sample_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.0, n, m.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_are_independent() {
        let mut a = Rng::substream(42, stream::SHUFFLE);
        let mut b = Rng::substream(42, stream::THRESHOLD);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
        let mut a2 = Rng::substream(42, stream::SHUFFLE);
        assert_eq!(a2.next_u64(), xa[0]);
    }

    #[test]
    fn integer_stream_is_pinned() {
        // Frozen first outputs; a change here means the generator changed.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let mut again = Rng::new(0);
        assert_eq!(first, again.next_u64());
        assert_eq!(first, FROZEN_SEED0_FIRST);
    }

    const FROZEN_SEED0_FIRST: u64 = 13080132717333068652;

    #[test]
    fn sample_indices_distinct_sorted() {
        let mut r = Rng::new(3);
        let idx = r.sample_indices(50, 16);
        assert_eq!(idx.len(), 16);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(r.sample_indices(5, 16).len(), 5);
    }
}
