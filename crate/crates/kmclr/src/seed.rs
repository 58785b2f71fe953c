//! Deterministic seed derivation.
//!
//! Every randomized stage derives its own RNG from the run seed and a
//! purpose label, so adding or reordering one stage never shifts the
//! random stream of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over arbitrary text; also used to fingerprint resolved configs.
pub fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable sub-seed for (`base`, `purpose`).
pub fn derive_seed(base: u64, purpose: &str) -> u64 {
    splitmix64(base ^ fnv1a(purpose))
}

/// Seeded generator for one named purpose.
pub fn rng(base: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, purpose))
}
