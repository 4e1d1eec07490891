//! Counter-style seed derivation.
//!
//! Every random quantity in the toolkit is addressed by a path of integers
//! (`seed`, stream tag, draw index, block, ...). The path is hashed into an
//! independent ChaCha stream, so a value depends only on its address and never
//! on evaluation order or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream tags. Keeping them in one place avoids accidental stream reuse.
pub mod tag {
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const LATENT: u64 = 0x4c41_5445;
    pub const CLASSIFIER: u64 = 0x434c_4153;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const STEP: u64 = 0x5354_4550;
    pub const INIT: u64 = 0x494e_4954;
    pub const DIRECTION: u64 = 0x4449_5245;
    pub const TASK: u64 = 0x5441_534b;
    pub const TRIAL: u64 = 0x5452_4941;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `seed` and an address path into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x3c6e_f372_fe94_f82b)));
    }
    h
}

/// A ChaCha stream addressed by `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn fill_standard_normal<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn standard_normal_vec(seed: u64, path: &[u64], len: usize) -> Vec<f64> {
    let mut rng = stream(seed, path);
    let mut out = vec![0.0; len];
    fill_standard_normal(&mut rng, &mut out);
    out
}

/// Fresh entropy for runs where the caller did not fix a seed.
pub fn entropy_seed() -> u64 {
    rand::rng().random()
}
