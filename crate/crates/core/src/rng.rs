//! Seeded randomness.
//!
//! Every random quantity in the crate comes from ChaCha8 seeded with
//! `seed_from_u64`, so results do not depend on platform or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with entries drawn uniformly from `[-bound, bound)`.
pub fn uniform_tensor(rng: &mut SeededRng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}
