//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream whose seed is derived from a base seed and a path of labels, so
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_stream(base: u64, path: &[u64]) -> Stream {
    stream(derive_seed(base, path))
}

/// Labels used as the first element of derivation paths.
pub mod label {
    pub const ENV_ROLE: u64 = 0x01;
    pub const POLICY_ROLE: u64 = 0x02;
    pub const TASK: u64 = 0x03;
    pub const ROLE_ORDER: u64 = 0x04;
    pub const EPISODE: u64 = 0x05;
    pub const COUNTERFACTUAL: u64 = 0x06;
    pub const INIT: u64 = 0x07;
    pub const EVAL: u64 = 0x08;
    pub const BUFFER: u64 = 0x09;
}
