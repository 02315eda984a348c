//! Seeding conventions.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), which is
//! portable and reproducible across platforms. Independent streams (per
//! volume, per training step, per sampler worker) get their own seed derived
//! from a master seed with a SplitMix64 mixing chain, so results never
//! depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the sub-stream identified by `path` under `master`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn derive(master: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(master, path))
}

/// Domain tags keep streams for different purposes apart.
pub mod stream {
    pub const PHANTOM: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PRETRAIN_BATCH: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const PROBE_BATCH: u64 = 5;
    pub const FOLDS: u64 = 6;
}
