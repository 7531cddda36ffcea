//! Deterministic seed derivation so that independent random streams (frame
//! noise, sampling, RANSAC) never share state.

/// SplitMix64 step. Good avalanche behaviour, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed, a stream tag and an index.
///
/// Distinct `(tag, index)` pairs give unrelated seeds for the same base, which
/// keeps e.g. source and target streams disjoint.
pub fn derive(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ tag.wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}
