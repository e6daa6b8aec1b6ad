//! Stable, platform-independent hashing used for seeds and feature vectors.
//!
//! Everything here must produce identical values across runs, platforms and
//! toolchains, so `std`'s randomly keyed hasher is never used.

use std::hash::Hasher;

use fnv::FnvHasher;

/// FNV-1a over a sequence of byte parts, each part followed by a 0xff separator
/// so that `("ab", "c")` and `("a", "bc")` hash differently.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hasher = FnvHasher::default();
    for part in parts {
        hasher.write(part);
        hasher.write_u8(0xff);
    }
    hasher.finish()
}

/// Hash of a seed followed by string parts.
pub fn seeded_hash(seed: u64, parts: &[&str]) -> u64 {
    let seed_bytes = seed.to_le_bytes();
    let mut all: Vec<&[u8]> = Vec::with_capacity(parts.len() + 1);
    all.push(&seed_bytes);
    all.extend(parts.iter().map(|p| p.as_bytes()));
    stable_hash(&all)
}

/// One step of the splitmix64 generator.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random vector with entries uniform in [-1, 1).
pub fn hashed_vector(key: u64, dim: usize) -> Vec<f64> {
    let mut state = key;
    (0..dim)
        .map(|_| {
            let bits = splitmix64(&mut state) >> 11;
            (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}
