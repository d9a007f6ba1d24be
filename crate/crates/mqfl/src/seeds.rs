//! Deterministic sub-seed derivation.
//!
//! Every random stream in an experiment (data generation, partitioning,
//! parameter init, per-client noise trajectories, ...) derives its own seed
//! from the master seed, a purpose tag, and an index. This keeps streams
//! independent: no two purposes ever share RNG state by accident.

use sha2::{Digest, Sha256};

/// Derives a 64-bit sub-seed from `(master, tag, index)`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
