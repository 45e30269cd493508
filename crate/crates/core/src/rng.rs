//! Counter-based seed splitting.
//!
//! Every random stream in the crate is addressed by `(master seed, domain, index)`.
//! The domain selects an independent key; the index selects a ChaCha stream under
//! that key, so stream `k` never depends on how many other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Values are part of the on-disk determinism contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    InitialCondition = 1,
    BaseTraining = 2,
    DifferenceInit = 3,
    DifferenceTraining = 4,
    SweepDecision = 5,
    SweepParameter = 6,
    Baseline = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed; used when a component needs a plain `u64` seed of its own.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(domain as u64)) ^ index)
}

/// Independent generator for stream `index` of `domain` under `seed`.
pub fn split(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain as u64)));
    rng.set_stream(index);
    rng
}
