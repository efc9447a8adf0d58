//! Seed derivation for reproducible, scheduling-independent randomness.
//!
//! Every random stream in the pipeline is a `ChaCha8Rng` keyed by a hash of
//! the global seed and a purpose-specific path (sample id, epoch, ...), so
//! the value drawn for a sample never depends on which worker produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hash `seed` together with an ordered list of labels into a 64-bit seed.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, parts: &[&str]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
