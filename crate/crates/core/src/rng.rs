//! Seed derivation. Every stochastic stage draws from its own ChaCha stream
//! keyed by (master seed, label path), so changing one stage never shifts
//! another stage's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::{c, Scalar};

pub type StreamRng = ChaCha8Rng;

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Derive a child seed from a parent seed, a label and an item index.
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_for(parent: u64, label: &str) -> StreamRng {
    stream(derive_seed(parent, label))
}

/// `n` independent unit-Gaussian values.
pub fn gaussian_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            c(v)
        })
        .collect()
}
