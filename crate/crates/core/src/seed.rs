//! Seed derivation.
//!
//! Every random stream comes from the single run seed. A sub-seed is
//! `splitmix64(seed ^ fnv1a64(purpose))`, and per-step/per-sample streams fold
//! further integers in with the same finaliser.

use dpk_tensor::Fnv64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Fnv64::new();
    h.write(purpose.as_bytes());
    splitmix64(seed ^ h.finish())
}

/// Folds integers into a seed, order-sensitively.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purposes_separate_streams() {
        assert_ne!(derive_seed(0, "mask"), derive_seed(0, "data"));
        assert_eq!(derive_seed(3, "mask"), derive_seed(3, "mask"));
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
    }
}
