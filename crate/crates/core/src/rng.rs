//! Seeded sampling helpers. All randomness in the crate flows through here so
//! identical seeds reproduce identical tensors on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    fnv1a(label.as_bytes(), seed ^ 0x9e37_79b9_7f4a_7c15)
}

pub fn normal_tensor(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform_tensor(rng: &mut SeededRng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// 64-bit FNV-1a, folded over `bytes` starting from `basis`.
pub fn fnv1a(bytes: &[u8], basis: u64) -> u64 {
    let mut h = basis ^ 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
