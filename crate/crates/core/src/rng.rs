//! Seed derivation.
//!
//! Every stochastic quantity in the crate is drawn from a `ChaCha8Rng`
//! seeded from a 64-bit seed derived from a parent seed and a stream tag,
//! so results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(parent, tags...)`.
pub fn derive_seed(parent: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(parent), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
