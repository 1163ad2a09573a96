//! Seeded random streams. Every stochastic step derives its own ChaCha8 stream
//! from the master seed plus a path of indices, so results never depend on
//! scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Domain tags so different subsystems never share a stream.
pub mod domain {
    pub const GA_INIT: u64 = 1;
    pub const GA_CHILD: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const EVENT: u64 = 4;
    pub const CONVERT: u64 = 5;
    pub const SINGLE_SHOT: u64 = 6;
    pub const TDC_CHAR: u64 = 7;
}
