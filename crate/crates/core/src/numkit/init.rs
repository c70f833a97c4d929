use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

/// Generator used for every seeded draw in the engine.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// `n` draws from `U[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn uniform_fan_in(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = libm::sqrt(6.0 / fan_in.max(1) as f64);
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}
