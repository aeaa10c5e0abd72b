//! Stable seed derivation.
//!
//! Every random draw in the harness is keyed by a seed derived from the run
//! seed plus string/integer coordinates (question id, sample index, turn).
//! The mixing is fixed here so logs are reproducible across processes and
//! platforms; `std::hash` makes no such promise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Incremental seed mixer.
#[derive(Debug, Clone, Copy)]
pub struct SeedMixer(u64);

impl SeedMixer {
    pub fn new(base: u64) -> Self {
        Self(splitmix64(base ^ FNV_OFFSET))
    }

    pub fn str(mut self, s: &str) -> Self {
        let mut h = FNV_OFFSET;
        for b in s.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        // length terminator so ("ab","c") and ("a","bc") differ
        self.0 = splitmix64(self.0 ^ h ^ (s.len() as u64).rotate_left(32));
        self
    }

    pub fn int(mut self, v: u64) -> Self {
        self.0 = splitmix64(self.0 ^ splitmix64(v));
        self
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Seed for the `index`-th member of a group rolled out for `question_id`.
pub fn derive_seed(base: u64, question_id: &str, index: u64) -> u64 {
    SeedMixer::new(base).str(question_id).int(index).finish()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "q1", 0);
        assert_eq!(a, derive_seed(7, "q1", 0));
        assert_ne!(a, derive_seed(7, "q1", 1));
        assert_ne!(a, derive_seed(7, "q2", 0));
        assert_ne!(a, derive_seed(8, "q1", 0));
        assert_ne!(
            SeedMixer::new(1).str("ab").str("c").finish(),
            SeedMixer::new(1).str("a").str("bc").finish()
        );
    }

    #[test]
    fn pinned_value() {
        // guards against accidental changes to the mixing, which would
        // silently change every logged run; values from a separate
        // implementation
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(derive_seed(42, "toy-0001", 3), 3_175_972_354_238_110_139);
    }
}
