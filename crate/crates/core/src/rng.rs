//! Seed derivation and RNG construction.
//!
//! Every random decision in the workspace flows through a ChaCha stream
//! seeded via [`derive_seed`], so a run is reproducible from a single base
//! seed plus the integer coordinates of the thing being randomized
//! (grid cell, epoch, ensemble member, ...).

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a list of coordinates.
///
/// The same `(base, words)` always yields the same child, and children for
/// different coordinates are decorrelated. Used for grid cells
/// (`[l1_idx, l2_idx, repeat]`), per-epoch shuffles, dropout streams and
/// ensemble member draws.
pub fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut h = mix64(base ^ 0x6A09_E667_F3BC_C909);
    for &w in words {
        h = mix64(h ^ w.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    h
}

/// Counter-based generator: identical seeds give identical streams on every
/// platform, which the resampling and shuffling contracts rely on.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_deterministic() {
        assert_eq!(derive_seed(42, &[1, 2, 3]), derive_seed(42, &[1, 2, 3]));
        assert_ne!(derive_seed(42, &[1, 2, 3]), derive_seed(42, &[1, 2, 4]));
        assert_ne!(derive_seed(42, &[0]), derive_seed(42, &[]));
        assert_ne!(derive_seed(42, &[0]), derive_seed(42, &[0, 0]));
        assert_ne!(derive_seed(42, &[]), derive_seed(43, &[]));
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = rng_from_seed(7);
        let mut b = rng_from_seed(7);
        for _ in 0..100 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }
}
