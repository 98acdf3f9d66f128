//! Seeded, platform-independent random streams.
//!
//! The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), seeded
//! through `seed_from_u64`. Its output stream is specified bit-for-bit and
//! does not depend on the host platform or pointer width. Independent
//! sub-streams (one per clip, per case, ...) are obtained with
//! [`SeededRng::fork`], which selects a ChaCha stream id instead of mixing
//! seeds by hand.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator on stream `stream` of the same seed. Forking does not
    /// advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform<S: Scalar>(&mut self, lo: S, hi: S) -> S {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * S::lit(u)
    }

    pub fn normal<S: Scalar>(&mut self) -> S {
        let v: f64 = self.inner.sample(StandardNormal);
        S::lit(v)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniform_tensor<S: Scalar>(&mut self, shape: Vec<usize>, lo: S, hi: S) -> Tensor<S> {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: Vec<usize>, std: S) -> Tensor<S> {
        Tensor::from_fn(shape, |_| self.normal::<S>() * std)
    }
}
