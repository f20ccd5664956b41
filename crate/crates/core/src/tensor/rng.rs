use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// ChaCha8 stream keyed by a 64-bit seed.
///
/// ChaCha8 output is specified independently of platform and word size, so a
/// seed names the same stream everywhere. Normals use `rand_distr`'s
/// ziggurat sampler.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, stable for a given `(seed, stream)` pair.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Elementwise independent draws from `N(mean, var)`.
///
/// Only the Monte-Carlo checks use this; moment propagation never samples.
pub fn gaussian_sample(rng: &mut SeededRng, mean: &Tensor, var: &Tensor) -> Result<Tensor> {
    if mean.shape() != var.shape() {
        return Err(Error::shape(
            "gaussian_sample",
            format!("{:?} vs {:?}", mean.shape(), var.shape()),
        ));
    }
    if var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeVariance("gaussian_sample"));
    }
    let data = mean
        .data()
        .iter()
        .zip(var.data())
        .map(|(&m, &v)| {
            if v == 0.0 {
                m
            } else {
                m + v.sqrt() * rng.normal()
            }
        })
        .collect();
    Ok(Tensor::from_raw(mean.shape().to_vec(), data))
}
