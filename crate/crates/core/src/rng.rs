//! Seed plumbing. Every stochastic routine takes an explicit `u64` seed and
//! derives independent streams from it by label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::{Image, Shape};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_str(seed: u64, label: &str) -> u64 {
    label.bytes().fold(seed, |s, b| derive(s, b as u64))
}

pub fn gaussian_image(shape: Shape, rng: &mut Rng) -> Image {
    let data = (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect();
    Image::from_vec(shape, data).expect("length matches shape")
}

pub fn gaussian_vec(len: usize, rng: &mut Rng) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
