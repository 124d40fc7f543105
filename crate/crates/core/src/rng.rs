//! Seeded randomness. Everything reproducible in this crate draws from
//! SplitMix64 streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::tensor::Tensor;

pub type SeededRng = SplitMix64;

pub fn seeded(seed: u64) -> SeededRng {
    SplitMix64::seed_from_u64(seed)
}

/// Mixes a base seed with a stream id so sub-generators are decorrelated.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` with 53 bits of precision.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `(-bound, bound)`.
pub fn symmetric(rng: &mut impl RngCore, bound: f64) -> f64 {
    (2.0 * unit(rng) - 1.0) * bound
}

pub fn gaussian(rng: &mut impl RngCore) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut impl RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

pub fn gaussian_tensor(rng: &mut impl RngCore, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, gaussian_vec(rng, n)).expect("rank 1..=3")
}

pub fn uniform_tensor(rng: &mut impl RngCore, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| symmetric(rng, bound)).collect();
    Tensor::new(shape, data).expect("rank 1..=3")
}
