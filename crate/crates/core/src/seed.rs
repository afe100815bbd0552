//! Deterministic seed derivation.
//!
//! Every random stream in a simulation is keyed by the experiment seed plus a
//! stream tag and coordinates such as (round, client), so results do not depend
//! on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 0x01;
    pub const SAMPLING: u64 = 0x02;
    pub const LOCAL: u64 = 0x03;
    pub const PREDICTOR: u64 = 0x04;
    pub const KMEANS: u64 = 0x05;
    pub const AVAILABILITY: u64 = 0x06;
    pub const SPLIT: u64 = 0x07;
    pub const DATAGEN: u64 = 0x08;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each part in turn.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(base, parts))
}
