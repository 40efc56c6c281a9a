//! Seed splitting.
//!
//! One global seed is split deterministically into independent per-purpose
//! streams so that sub-experiments (data generation, parameter init,
//! shuffling, subset selection) are each reproducible in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the seed bytes and a purpose tag; good enough to decorrelate
/// streams, and stable across platforms.
pub fn derive_seed(global: u64, purpose: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in global.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(PRIME);
    }
    for b in purpose.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(PRIME);
    }
    h
}

/// Indexed variant for per-item streams (one scene, one streak pass, ...).
pub fn derive_seed_indexed(global: u64, purpose: &str, index: u64) -> u64 {
    derive_seed(derive_seed(global, purpose), &index.to_string())
}

/// Deterministic RNG for a purpose-tagged stream.
pub fn stream(global: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, purpose))
}
