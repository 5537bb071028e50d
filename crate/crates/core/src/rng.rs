//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by
//! `(seed, stream)`. Streams are independent, so work split by stream index
//! (trial, worker, task) gives identical results regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier written into output metadata so CSVs can be traced to a generator.
pub const GENERATOR: &str = "chacha8-rand0.9/rand_distr0.5-ziggurat";

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a seed with a label so unrelated consumers of the same seed do not
/// share streams.
pub fn derive(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
