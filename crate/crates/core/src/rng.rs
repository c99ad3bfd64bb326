//! Seeding helpers. Every random stream in the crate is a ChaCha8 generator
//! seeded from a 64-bit value, so runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th item of a stream rooted at `base`. Independent of
/// evaluation order, so items can be processed in parallel.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index))
}
