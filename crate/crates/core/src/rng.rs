//! Seed-derived random streams.
//!
//! All randomness in the system flows from a single `u64` seed through named
//! ChaCha8 streams, so any component can be re-derived independently of the
//! order other components consume randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to map stream tags to ChaCha stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic RNG for (`seed`, `tag`).
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag.as_bytes()));
    rng
}

/// Deterministic RNG for (`seed`, `tag`, `index`) — per-class, per-epoch etc.
pub fn indexed_stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15));
    rng
}

/// Derived scalar seed for components that take a plain `u64`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    seed ^ fnv1a(tag.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15)
}
