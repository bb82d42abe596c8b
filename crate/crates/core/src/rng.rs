//! Seed derivation for independent, schedule-free random streams.
//!
//! Every stochastic step in the pipeline draws from a stream keyed by a tuple
//! of integers (master seed, patient, fraction, iteration, ...). Streams are
//! derived by repeated SplitMix64 mixing, so the result never depends on the
//! order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reproducible generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key path into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Generator for the stream identified by `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
