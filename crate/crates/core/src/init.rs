//! Deterministic parameter initialization.
//!
//! Each tensor's stream is seeded from `(seed, name)`, so two models that
//! share a parameter name get bit-identical initial values regardless of
//! which other parameters exist. This is what lets ablation settings share
//! backbone initialization.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::{Rng, SeedableRng};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// FNV-1a over the name, mixed with the run seed.
pub fn seed_for(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_for(seed, name))
}

/// Uniform in `[0, 1)` from the top 53 bits of one draw.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let mut u1 = uniform01(rng);
    if u1 == 0.0 {
        u1 = f64::MIN_POSITIVE;
    }
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(standard_normal(rng) * std)).collect();
    Tensor::from_vec(shape, data)
}

/// Identity-like rectangular matrix (ones on the diagonal).
pub fn eye_like<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] = T::ONE;
    }
    t
}
