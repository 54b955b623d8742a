//! Seeded generators. Every random draw in the crate goes through ChaCha8 so
//! streams are stable across platforms and releases of `rand`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for element `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)
}

/// Named sub-streams so that independent consumers never share draws.
pub mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const TRAIN_STEP: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const CHANNEL: u64 = 6;
    pub const EXPERIMENT: u64 = 7;
    pub const EPOCH: u64 = 8;
    pub const TEST: u64 = 9;
}
