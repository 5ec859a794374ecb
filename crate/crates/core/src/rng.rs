//! Seeded generators. Every stochastic routine takes one of these explicitly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StemRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StemRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Splits off an independent child generator.
pub fn fork<R: Rng + ?Sized>(rng: &mut R) -> StemRng {
    ChaCha8Rng::seed_from_u64(rng.random())
}

pub fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_gaussian(rng, &mut v);
    v
}
