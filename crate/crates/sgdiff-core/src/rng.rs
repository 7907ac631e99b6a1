//! Deterministic random streams.
//!
//! Every random draw in the project flows through [`Prng`], a ChaCha8 generator
//! keyed by (seed, stream, counter). Derived streams let training draw the
//! noise for step `n` without replaying steps `0..n`, which is what makes
//! checkpoint resume bit-exact: the RNG state never needs to be serialized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::element::Element;
use alloc::vec::Vec;

/// Fixed stream ids so independent consumers never share a stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN_STEP: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const DATAGEN: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PRETRAIN: u64 = 6;
}

/// SplitMix64 finalizer; mixes seed words into a well-spread key.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic RNG handle.
pub struct Prng(ChaCha8Rng);

impl Prng {
    /// Stream for one-off consumers (dataset generation, sampling runs).
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::counted(seed, stream, 0)
    }

    /// Stream for per-step consumers; `counter` is typically the step index.
    pub fn counted(seed: u64, stream: u64, counter: u64) -> Self {
        let key = mix64(seed ^ mix64(stream) ^ mix64(counter).rotate_left(17));
        Prng(ChaCha8Rng::seed_from_u64(key))
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.0.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Vector of standard normal draws.
    pub fn normal_vec<E: Element>(&mut self, len: usize) -> Vec<E> {
        (0..len).map(|_| E::from_f64(self.normal())).collect()
    }

    /// Vector of uniform draws in (-bound, bound).
    pub fn uniform_vec<E: Element>(&mut self, len: usize, bound: f64) -> Vec<E> {
        (0..len)
            .map(|_| E::from_f64((self.uniform() * 2.0 - 1.0) * bound))
            .collect()
    }
}
