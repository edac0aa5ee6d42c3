//! Shared fixtures for the benchmarks.

use hcd_core::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic uniform tensor in `[lo, hi)`.
pub fn fixture(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A 3-scale image pyramid of side `side`.
pub fn image_pyramid(batch: usize, side: usize, seed: u64) -> [Tensor; 3] {
    [0, 1, 2].map(|k| fixture(Shape::new(batch, 3, side >> k, side >> k), 0.0, 1.0, seed + k as u64))
}
