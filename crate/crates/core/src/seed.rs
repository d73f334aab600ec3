//! Counter-based seed derivation.
//!
//! Every random stream in the lab is keyed by `(master, tag, index)` so any
//! task, layer or epoch can be regenerated on its own, in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags never share a derived seed in practice.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TASK: u64 = 3;
    pub const POWER: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const MITIGATOR: u64 = 6;
    pub const LABELS: u64 = 7;
    pub const PERMUTE: u64 = 8;
    pub const FLIP: u64 = 9;
    pub const CLASS_ORDER: u64 = 10;
    pub const TEST_LABELS: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream tag and a counter.
pub fn derive(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn rng(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}
