//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, domain)` and selected by an index, so work can be split across
//! threads (or resumed mid-run) without changing any sampled value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains. Distinct domains never share a key.
pub mod domain {
    pub const SCENE: u64 = 1;
    pub const INIT_POSE: u64 = 2;
    pub const AIM_BATCH: u64 = 3;
    pub const REFINE_BATCH: u64 = 4;
    pub const PARAM_INIT: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const GRADCHECK: u64 = 7;
    pub const OUTLIERS: u64 = 8;
    pub const NOISE: u64 = 9;
    pub const CALIBRATION: u64 = 10;
}

/// Independent generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
