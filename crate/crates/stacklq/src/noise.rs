//! Counter-based Gaussian increments.
//!
//! Every Brownian increment is derived independently from the triple
//! `(master seed, path index, step index)`, which keys a fresh ChaCha8
//! stream. Partitioning paths across workers therefore cannot change the
//! noise; reductions stay bit-reproducible as long as they run in fixed
//! ascending path order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn key(seed: u64, path: u64, step: u64) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[0..8].copy_from_slice(&seed.to_le_bytes());
    k[8..16].copy_from_slice(&path.to_le_bytes());
    k[16..24].copy_from_slice(&step.to_le_bytes());
    // Domain tag so unrelated derivations from the same seed stay disjoint.
    k[24..32].copy_from_slice(&0x7374_6163_6b6c_7131_u64.to_le_bytes());
    k
}

/// Standard normal draw for `(seed, path, step)`.
pub fn standard_normal(seed: u64, path: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::from_seed(key(seed, path, step));
    rng.sample(StandardNormal)
}

/// Brownian increment with variance `h`.
pub fn brownian_increment(seed: u64, path: u64, step: u64, h: f64) -> f64 {
    standard_normal(seed, path, step) * h.sqrt()
}

/// Seeded stream for auxiliary draws (perturbation directions and the
/// like); `stream` separates independent uses of the same master seed.
pub fn aux_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut k = [0u8; 32];
    k[0..8].copy_from_slice(&seed.to_le_bytes());
    k[8..16].copy_from_slice(&stream.to_le_bytes());
    k[24..32].copy_from_slice(&0x7374_6163_6b6c_7132_u64.to_le_bytes());
    ChaCha8Rng::from_seed(k)
}
