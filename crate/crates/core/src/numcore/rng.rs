//! Seedable xoshiro256** generator with numbered sub-streams.
//!
//! Every stochastic step in the crate (initialisation, dropout, shuffles,
//! random graphs) draws from this type so that a seed fully determines a run
//! on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Derives an independent generator for a numbered sub-stream. The parent
    /// is not advanced.
    pub fn derive(seed: u64, stream: &[u64]) -> Self {
        let mut h = seed;
        for &part in stream {
            h = Xoshiro256StarStar::seed_from_u64(h ^ part.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64();
        }
        Rng::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
