//! Stateless, seed-derived random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, tags...)`, so
//! results never depend on call order and a resumed run sees the same draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub mod tag {
    pub const PARAM_INIT: u64 = 0x1001;
    pub const MASK: u64 = 0x1002;
    pub const BATCH: u64 = 0x1003;
    pub const AUGMENT: u64 = 0x1004;
    pub const SYNTH: u64 = 0x1005;
    pub const SPLIT: u64 = 0x1006;
    pub const HEAD_INIT: u64 = 0x1007;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of tags into a 64-bit stream key.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Normal(0, std) truncated to +-2 std by rejection.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
