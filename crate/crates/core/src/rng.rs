//! Seed derivation utilities.
//!
//! One master seed fans out into labeled streams ("data", "init",
//! "augment", ...) so experiment arms can share some streams and differ in
//! others. Derivation is pure arithmetic: no global state, stable across
//! platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a byte string; stable across builds and platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; whitens structured seed inputs.
pub fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a label.
pub fn labeled_seed(master: u64, label: &str) -> u64 {
    mix(master ^ fnv1a(label.as_bytes()))
}

/// Derive a per-item seed from a stream seed and an item index.
pub fn indexed_seed(stream: u64, index: u64) -> u64 {
    mix(stream ^ index)
}

/// Deterministic RNG for a labeled stream of a master seed.
pub fn stream_rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(labeled_seed(master, label))
}

/// Deterministic RNG directly from a raw seed.
pub fn seed_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn labels_give_distinct_streams() {
        let a = labeled_seed(7, "data");
        let b = labeled_seed(7, "init");
        assert_ne!(a, b);
        // Same inputs reproduce.
        assert_eq!(a, labeled_seed(7, "data"));
    }

    #[test]
    fn indexed_seeds_differ_for_adjacent_indices() {
        let s = labeled_seed(1, "corrupt");
        assert_ne!(indexed_seed(s, 0), indexed_seed(s, 1));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut r1 = stream_rng(42, "x");
        let mut r2 = stream_rng(42, "x");
        let a: [u64; 4] = [r1.gen(), r1.gen(), r1.gen(), r1.gen()];
        let b: [u64; 4] = [r2.gen(), r2.gen(), r2.gen(), r2.gen()];
        assert_eq!(a, b);
    }
}
