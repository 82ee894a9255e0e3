//! Seeded xoshiro generators. Every stochastic step in the engine draws from a
//! stream derived from an explicit seed, so runs replay bit-for-bit.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream for `(seed, stream)`. Uses the splitmix64
/// finalizer so neighbouring stream ids do not produce correlated states.
pub fn derived(seed: u64, stream: u64) -> Rng {
    seeded(sub_seed(seed, stream))
}

/// Seed for an independent child generator.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
