//! Seeded randomness. Every stochastic component takes an explicit seed so
//! runs are reproducible bit for bit.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

pub fn normal(rng: &mut Rng64) -> f64 {
    StandardNormal.sample(rng)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
