//! Per-purpose seed derivation. Every random choice in a run comes from the
//! single run seed through [`derive_seed`], so parallel scheduling can never
//! change an output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable 64-bit seed for `(base, purpose, key)`.
pub fn derive_seed(base: u64, purpose: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
