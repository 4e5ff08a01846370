//! Seed derivation. Every random stream in a run is derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for a named sub-stream of `root`.
pub fn derive(root: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(mix(root), |acc, &s| mix(acc ^ mix(s.wrapping_add(0xA5A5))))
}

pub fn rng_for(root: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stream))
}
