//! Counter-based randomness.
//!
//! Every random choice is keyed by `(seed, stream, index)` so a draw does not
//! depend on how many other draws happened before it. Replays are therefore
//! independent of iteration order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags; the generation or stage is packed into the low 32 bits.
pub mod stream {
    pub const ARROW: u64 = 1;
    pub const TRIAL: u64 = 2;
    pub const TAU: u64 = 3;
    pub const COVER_ARROW: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const TEST_FN: u64 = 6;
}

const WORDS_PER_KEY: u128 = 64;

pub fn keyed(seed: u64, tag: u64, sub: i64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 32) ^ (sub as u32 as u64));
    rng.set_word_pos(index as u128 * WORDS_PER_KEY);
    rng
}

/// Seed for trial `t` of a Monte Carlo run with master seed `seed`.
pub fn trial_seed(seed: u64, t: u64) -> u64 {
    keyed(seed, stream::TRIAL, 0, t).next_u64()
}

/// Uniform index in `0..count` keyed by `(seed, tag, sub, index)`.
pub fn keyed_index(seed: u64, tag: u64, sub: i64, index: u64, count: usize) -> usize {
    debug_assert!(count > 0);
    if count == 1 {
        return 0;
    }
    keyed(seed, tag, sub, index).gen_range(0..count)
}

/// Uniform draw in `[lo, hi)` keyed the same way.
pub fn keyed_uniform(seed: u64, tag: u64, sub: i64, index: u64, lo: f64, hi: f64) -> f64 {
    keyed(seed, tag, sub, index).gen_range(lo..hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_order_independent() {
        let a = keyed_index(7, stream::ARROW, 3, 11, 5);
        let _ = keyed_index(7, stream::ARROW, 3, 10, 5);
        let b = keyed_index(7, stream::ARROW, 3, 11, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let xs: Vec<u64> = (0..8).map(|g| keyed(1, stream::ARROW, g, 0).next_u64()).collect();
        for i in 0..xs.len() {
            for j in 0..i {
                assert_ne!(xs[i], xs[j]);
            }
        }
    }

    #[test]
    fn keyed_index_is_roughly_uniform() {
        let mut counts = [0usize; 3];
        for i in 0..30_000 {
            counts[keyed_index(99, stream::ARROW, 0, i, 3)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }
}
