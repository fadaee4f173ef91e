//! Counter-based seeding: every random stream is keyed by the master seed
//! plus a tuple of counters, so replications and optimizer starts can be
//! generated in any order and on any thread with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes, so data and optimizer starts never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Starts = 2,
    Weights = 3,
    Calibration = 4,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a 64-bit sub-seed from `seed` and a counter path.
pub fn sub_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

/// ChaCha8 generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, &[stream as u64, index]))
}
