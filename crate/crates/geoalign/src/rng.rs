//! Seeded randomness with named sub-streams.
//!
//! All randomness in the artifact flows from a single master seed through
//! named streams (`"data"`, `"init"`, `"shuffle"`, ...) so components can be
//! varied independently without perturbing each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Tensor;

/// Stable 64-bit stream seed derived from (master, name, index) via FNV-1a.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in master
        .to_le_bytes()
        .iter()
        .chain(name.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Deterministic RNG for a named sub-stream.
pub fn stream_rng(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name, index))
}

/// Tensor with i.i.d. normal entries scaled by `std`.
pub fn randn_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Tensor with i.i.d. uniform entries in `[lo, hi)`.
pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree by construction")
}
