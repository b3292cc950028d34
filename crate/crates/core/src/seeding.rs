//! Stable seed derivation for counter-based randomness.
//!
//! `std::hash` makes no cross-version stability promise, so seeds for toy
//! logits, rollouts, and per-sample streams are folded with a fixed mixer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit seed. Order matters.
pub fn fold<I: IntoIterator<Item = u64>>(words: I) -> u64 {
    let mut acc = 0x243F_6A88_85A3_08D3u64;
    for w in words {
        acc = mix64(acc ^ mix64(w));
    }
    acc
}

pub fn rng_from<I: IntoIterator<Item = u64>>(words: I) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fold(words))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_is_order_sensitive() {
        assert_ne!(fold([1, 2]), fold([2, 1]));
        assert_eq!(fold([1, 2, 3]), fold([1, 2, 3]));
    }
}
