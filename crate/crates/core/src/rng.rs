//! Seed derivation.
//!
//! Every random draw in the pipeline comes from a `ChaCha8Rng` whose seed is
//! derived from the experiment seed, a domain tag, and an index. Derivation is
//! a pure function, so subsystem seeds never depend on call order and a run is
//! reproducible from its top-level seed alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `(base, tag, index)`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(fnv1a(tag)) ^ splitmix64(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// RNG for a derived seed.
pub fn rng_for(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// RNG directly from a seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
