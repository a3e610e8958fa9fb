//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
///
/// Neighbouring indices map to unrelated seeds, so per-item streams derived
/// from one base seed are decorrelated.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for stream `index` of `base`.
pub fn stream(base: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, index))
}

/// Distinct tags keep streams of different purposes apart.
pub mod tags {
    pub const DATA: u64 = 0x01;
    pub const INIT: u64 = 0x02;
    pub const EPOCH: u64 = 0x03;
    pub const STEP: u64 = 0x04;
    pub const CANDIDATE: u64 = 0x05;
    pub const ENCODER: u64 = 0x06;
    pub const PROBE: u64 = 0x07;
    pub const SCENES: u64 = 0x08;
}

/// Stream for `(tag, index)` under `base`.
pub fn tagged(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    stream(derive_seed(base, tag), index)
}
