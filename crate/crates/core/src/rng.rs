//! Seeded random streams.
//!
//! Every stochastic component draws from a SplitMix64 generator
//! (`rand_xoshiro::SplitMix64`: state += 0x9e3779b97f4a7c15, then the
//! Stafford variant-13 finalizer). Substreams are keyed by mixing a base
//! seed with a stream index, so results depend only on `(seed, index)`.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream number `index` derived from `seed`.
pub fn stream(seed: u64, index: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(mix(seed ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN))))
}

/// Stream for a named purpose, so unrelated consumers of one seed never
/// share draws.
pub fn purpose_stream(seed: u64, purpose: &str, index: u64) -> SplitMix64 {
    let tag = purpose
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    stream(seed ^ mix(tag), index)
}
