//! Seeded RNG substreams.
//!
//! One global seed fans out into named substreams (init, shuffle, sampling)
//! so that sweeps changing one axis leave the other streams untouched.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a deterministic RNG for `name` from the global `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mixed = fnv1a64(name.as_bytes()) ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}
