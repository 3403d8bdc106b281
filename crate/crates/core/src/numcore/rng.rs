//! Seeded randomness.
//!
//! Every stream is a ChaCha20 generator keyed by the run seed. Independent
//! sub-streams share the key and differ only in the ChaCha stream id, so a
//! stream derived with [`Rng::fork`] never overlaps its parent or siblings.
//! The stream id of a fork is `parent_stream * 1_000_003 + salt + 1`
//! (wrapping), which keeps nested forks distinct.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DenseMatrix;

/// Identifier recorded in run metadata.
pub const RNG_ALGORITHM: &str = "chacha20-stream-fork-v1";

/// Named sub-streams used across a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Gumbel = 2,
    Dropout = 3,
    Split = 4,
    Data = 5,
    EvalGumbel = 6,
    Probe = 7,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::on_stream(seed, 0)
    }

    fn on_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent generator for a named purpose.
    pub fn fork(&self, stream: Stream) -> Self {
        self.fork_salt(stream as u64)
    }

    /// Derives an independent generator from an arbitrary salt, e.g. a
    /// domain or environment index.
    pub fn fork_salt(&self, salt: u64) -> Self {
        let id = self
            .stream
            .wrapping_mul(1_000_003)
            .wrapping_add(salt)
            .wrapping_add(1);
        Self::on_stream(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.inner.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| self.normal() * std)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Standard Gumbel transform `-ln(-ln u)`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Matrix of independent standard Gumbel draws.
pub fn sample_gumbel(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| gumbel_from_uniform(rng.uniform_open()))
}
