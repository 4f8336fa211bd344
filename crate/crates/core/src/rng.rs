//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from a ChaCha stream keyed by
//! `(seed, stream)`. Parallel work is split along stream indices, never along
//! thread boundaries, so results do not depend on how many workers ran.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Number of Monte Carlo draws that share one stream.
pub const BLOCK: usize = 4096;

pub fn keyed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed, e.g. one per restart of an experiment.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_std_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// Splits `n` draws into `(block index, block length)` pairs of at most [`BLOCK`].
pub fn blocks(n: usize) -> impl Iterator<Item = (u64, usize)> {
    (0..n.div_ceil(BLOCK)).map(move |b| (b as u64, BLOCK.min(n - b * BLOCK)))
}
