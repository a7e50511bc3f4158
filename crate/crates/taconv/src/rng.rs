//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! Every random draw in the crate flows through a `ChaCha8Rng` seeded from a
//! `u64`. Sub-streams (per branch, per image, per epoch) are derived from a
//! base seed and a textual tag, so results do not depend on the order in
//! which the streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag bytes, folded into the base via splitmix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(base ^ h)
}

/// Derive an indexed stream seed, e.g. one per image or per branch.
pub fn derive_seed_n(base: u64, tag: &str, n: u64) -> u64 {
    splitmix64(derive_seed(base, tag).wrapping_add(n))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
