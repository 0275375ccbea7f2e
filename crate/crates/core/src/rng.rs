//! Seeded xoshiro256** streams.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a run seeded with `seed`.
pub fn derived(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(seed ^ index)
}

/// Splits a seed into a second, unrelated seed (e.g. eval vs. train streams).
pub fn fork(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
