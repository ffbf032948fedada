//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8 seeded from a `u64`. ChaCha
//! output is specified independently of platform and word size, so a seed
//! reproduces the same world everywhere. Independent per-entity streams are
//! derived by mixing the master seed with a stream key through SplitMix64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keys used by the generators, so two stages never share a stream by accident.
pub mod streams {
    pub const PROCGEN: u64 = 0x01;
    pub const TRAFFIC_SPAWN: u64 = 0x02;
    pub const VEHICLE_ROUTE: u64 = 0x03;
    pub const PEDESTRIAN_ROUTE: u64 = 0x04;
    pub const ORDERS: u64 = 0x05;
    pub const TASKS: u64 = 0x06;
    pub const AGENTS: u64 = 0x07;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream for `(stream, key)` under `seed`.
pub fn substream(seed: u64, stream: u64, key: u64) -> SimRng {
    let s = splitmix64(seed ^ splitmix64(stream.wrapping_mul(0xA24B_AED4_963E_E407) ^ splitmix64(key)));
    seeded(s)
}
