//! Seeded RNG shared by all parameter initialization and data synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::tensor::{Scalar, Tensor};

/// Reproducible random source. One instance is threaded through model
/// initialization so a seed pins every weight.
pub struct ModelRng {
    inner: ChaCha8Rng,
}

impl ModelRng {
    pub fn seed_from_u64(seed: u64) -> ModelRng {
        ModelRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream, e.g. one per dataset item.
    pub fn fork(seed: u64, stream: u64) -> ModelRng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        ModelRng { inner: rng }
    }

    /// Tensor with entries drawn from N(0, std^2). Values are sampled in
    /// f64 and narrowed, so f32 and f64 models share the same draw.
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0f64, std).expect("std must be positive");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(dist.sample(&mut self.inner)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape/data agree by construction")
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    /// Bernoulli draw with probability `p` of `true`.
    pub fn coin(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }
}

/// Initialization std for weights, per the artifact's convention.
pub const INIT_STD: f64 = 0.02;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Tensor<f32> = ModelRng::seed_from_u64(9).normal(&[4, 4], INIT_STD);
        let b: Tensor<f32> = ModelRng::seed_from_u64(9).normal(&[4, 4], INIT_STD);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn f32_model_is_narrowed_f64_draw() {
        let a: Tensor<f32> = ModelRng::seed_from_u64(3).normal(&[8], INIT_STD);
        let b: Tensor<f64> = ModelRng::seed_from_u64(3).normal(&[8], INIT_STD);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
