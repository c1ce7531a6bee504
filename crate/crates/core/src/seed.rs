//! Stable seed derivation.
//!
//! Every random stream in a run is keyed by a tuple of integers mixed through
//! SplitMix64, so adding a configuration or a trial never shifts the draws of
//! another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into a single 64-bit seed. Order matters.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags, so that different consumers of the same base seed never collide.
pub mod tag {
    pub const VALIDATION: u64 = 0x7661_6c;
    pub const CALIBRATION: u64 = 0x6361_6c;
    pub const TEST: u64 = 0x7465_7374;
    pub const POOL: u64 = 0x706f_6f6c;
    pub const CANDIDATES: u64 = 0x6361_6e64;
    pub const GP_FIT: u64 = 0x6770;
    pub const TRIAL: u64 = 0x7472_6961;
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}
