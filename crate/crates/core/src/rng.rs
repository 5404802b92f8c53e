//! Seed derivation. Every independent unit of work (a dialogue, a trial, a
//! grid point) gets its own RNG stream derived from the run seed and a stable
//! label, so serial and parallel runs draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, parts: &[&str]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, parts))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
