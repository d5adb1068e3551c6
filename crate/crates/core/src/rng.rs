//! Seeded randomness.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream seeded
//! with a 64-bit value. Sub-seeds are derived from a root seed and a textual
//! tag with [`derive_seed`], so two subsystems never share a stream.
//!
//! Shuffles are plain Fisher-Yates, walking from the last index down, with
//! bounded draws produced by rejection sampling on `next_u64`. Neither step
//! depends on a third-party algorithm that could change between releases,
//! so a manifest shuffled with a given seed is the same on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream type used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and `tag`: FNV-1a over the tag bytes,
/// xor-ed with the root and passed through the SplitMix64 finalizer.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(root ^ h)
}

/// Uniform integer in `[0, bound)`; `bound` must be positive.
pub fn below(rng: &mut Rng, bound: u64) -> u64 {
    assert!(bound > 0, "empty range");
    // largest multiple of bound that fits, minus one
    let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return v % bound;
        }
    }
}

/// Uniform float in `[0, 1)` with 53 random bits.
pub fn unit_f64(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
