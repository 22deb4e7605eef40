//! Seeded random streams.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), keyed by the 64-bit
//! master seed through `seed_from_u64` and separated into independent
//! sub-streams with ChaCha's native 64-bit stream id. Each consumer uses the
//! fixed stream id from [`streams`], so changing how one consumer draws never
//! perturbs another.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Fixed sub-stream ids derived from the master seed.
pub mod streams {
    /// Long-tailed ID train/test mixture.
    pub const ID_DATA: u64 = 1;
    /// Auxiliary OOD pool used during training.
    pub const AUX_OOD: u64 = 2;
    /// Held-out OOD test sets; the kind index is added to this base.
    pub const TEST_OOD: u64 = 16;
    /// Network parameter initialization.
    pub const PARAM_INIT: u64 = 3;
    /// Prototype bank initialization.
    pub const PROTO_INIT: u64 = 4;
    /// Mini-batch sampling.
    pub const BATCHES: u64 = 5;
    /// Head-class negatives for the margin loss.
    pub const NEGATIVES: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    /// Stream 0 of `seed`.
    pub fn new(seed: u64) -> Self {
        Self::for_stream(seed, 0)
    }

    pub fn for_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// +1 or -1 with equal probability.
    pub fn sign(&mut self) -> f64 {
        if self.inner.next_u32() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..len`, in sampled order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, len, amount).into_vec()
    }

    /// Unit vector drawn uniformly from the sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let n = super::norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}
