//! Counter-based random streams.
//!
//! Every random quantity in a simulation or chain is drawn from a ChaCha8
//! stream selected by a key: the run seed, a variable tag and up to two
//! integer coordinates (site, day, iteration...). Two draws with the same key
//! always see the same numbers regardless of the order or thread in which the
//! work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Variables that own a dedicated stream family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Variable {
    Sites = 1,
    BiasAlpha0 = 2,
    BiasBeta0 = 3,
    BiasAlpha1 = 4,
    BiasBeta1 = 5,
    ErrorProcess = 6,
    Nugget = 7,
    ModelBackground = 8,
    FireEpisodes = 9,
    Missing = 10,
    Chain = 11,
    LatentDay = 12,
    Folds = 13,
    Grid = 14,
    Oracle = 15,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, variable, a, b)`.
pub fn stream(seed: u64, var: Variable, a: u64, b: u64) -> ChaCha8Rng {
    let key = mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(var as u64 | 1) ^ var as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(mix64(a.wrapping_mul(0xa076_1d64_78bd_642f) ^ mix64(b ^ 0xe703_7ed1_a0b4_28db)));
    rng
}

/// Derive a child stream from a base value drawn off a parent generator.
/// Used inside a sweep to hand independent per-day generators to workers.
pub fn child(base: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng
}
