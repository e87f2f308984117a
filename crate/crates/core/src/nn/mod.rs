//! A minimal reverse-mode toolkit: CNHW tensors, hand-written backward passes
//! and flat parameter vectors.

mod ops;
mod params;
mod real;
mod seq;
mod tensor;

pub use ops::{avg_pool2, avg_pool2_backward, flatten, silu, silu_backward, unflatten, upsample2, upsample2_backward, Conv2d, Linear, Matrix};
pub use params::{first_non_finite, ema_update, Adam, ParamGroup, ParamLayout};
pub use real::Real;
pub(crate) use seq::split_pair;
pub use seq::{ConvNet, ConvNetSpec, ConvNetTrace};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Normal init with variance `1 / (3 * fan_in)` (the variance of the common
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` default) for every group whose name
/// ends in `.w`; everything else starts at zero.
pub fn init_params<R: Rng>(layout: &ParamLayout, fan_in: impl Fn(&ParamGroup) -> usize, rng: &mut R) -> Vec<f32> {
    let mut p = vec![0.0f32; layout.total()];
    for g in layout.groups() {
        if !g.name.ends_with(".w") {
            continue;
        }
        let std = (1.0 / (3 * fan_in(g).max(1)) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in &mut p[g.range()] {
            *v = dist.sample(rng) as f32;
        }
    }
    p
}

/// Converts an `f32` parameter vector to another precision.
pub fn cast_params<T: Real>(p: &[f32]) -> Vec<T> {
    p.iter().map(|&v| T::of(v as f64)).collect()
}
