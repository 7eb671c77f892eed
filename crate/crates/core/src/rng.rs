//! Seed derivation.
//!
//! All randomness in a run descends from one user seed. Per-purpose and
//! per-epoch streams are derived by mixing salts into that seed, so resuming
//! at an epoch boundary reproduces the exact stream an uninterrupted run
//! would have used.

/// Salt for weight initialization.
pub const SALT_INIT: u64 = 0x01;
/// Salt for per-epoch shuffling of the training set.
pub const SALT_SHUFFLE: u64 = 0x02;
/// Salt for per-epoch gate draws.
pub const SALT_GATES: u64 = 0x03;
/// Salt for per-epoch augmentation draws.
pub const SALT_AUGMENT: u64 = 0x04;
/// Salt for synthetic test-split generation.
pub const SALT_TEST_SPLIT: u64 = 0x05;

/// ChaCha generator seeded for a purpose; the sole RNG family in the crate.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from (seed, salt).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ salt.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Derives an independent seed from (seed, salt, epoch).
pub fn epoch_seed(seed: u64, salt: u64, epoch: usize) -> u64 {
    splitmix64(mix_seed(seed, salt).wrapping_add(epoch as u64))
}
