//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! derived from a global seed and a purpose label, so editing one part of an
//! experiment never shifts the random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::ndmath::Tensor;

pub type SimRng = ChaCha8Rng;

/// Derives a child seed from `parent` and a purpose label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(parent: u64, label: &str) -> SimRng {
    rng_from_seed(derive_seed(parent, label))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut SimRng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches by construction")
}
