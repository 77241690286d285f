//! Stable seed derivation.
//!
//! Every random stream in the lab is a `ChaCha8Rng` seeded from a `u64` obtained by
//! folding a base seed with a path of labels and indices through SplitMix64. The
//! mapping is fixed by this file alone, so the seed tree can be rebuilt by any
//! implementation that follows the same folding rule:
//!
//! ```text
//! derive(base, [p0, p1, ..]) = fold(state = base, |s, p| splitmix64(s ^ splitmix64(p)))
//! label(name)                = FNV-1a 64 of the UTF-8 bytes
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a stage or stream name.
pub const fn label(name: &str) -> u64 {
    let bytes = name.as_bytes();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
        i += 1;
    }
    h
}

pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |s, &p| splitmix64(s ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Order-independent hash of a multiset of `u64` keys.
pub fn multiset_key(keys: &[u64]) -> u64 {
    let mut sorted = keys.to_vec();
    sorted.sort_unstable();
    derive(label("multiset") ^ sorted.len() as u64, &sorted)
}
