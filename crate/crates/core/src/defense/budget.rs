use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

/// Slack allowed on every budget check.
pub const BUDGET_TOL: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Zero,
    UniformInBall,
    /// Standard normal noise clipped to the ball.
    GaussianClipped,
}

/// Where a per-pixel budget multiplier comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FreqMask {
    /// One H×W map shared by every image, values in [0, 1].
    Fixed { height: usize, width: usize, values: Vec<f32> },
    /// A map computed per image by [`super::make_hf_mask`].
    HighFrequency { cutoff: f64, low_mult: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    /// L∞ radius.
    pub eta: f64,
    pub alpha_step: f64,
    pub pgd_steps: usize,
    pub init_mode: InitMode,
    #[serde(default)]
    pub freq_mask: Option<FreqMask>,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self { eta: 0.05, alpha_step: 0.005, pgd_steps: 6, init_mode: InitMode::UniformInBall, freq_mask: None }
    }
}

impl PerturbationBudget {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid("eta must lie in [0, 1]"));
        }
        if !(self.alpha_step > 0.0 && self.alpha_step.is_finite()) {
            return Err(Error::invalid("alpha_step must be positive"));
        }
        if self.eta > 0.0 && self.alpha_step > self.eta {
            return Err(Error::invalid("alpha_step may not exceed eta"));
        }
        match &self.freq_mask {
            Some(FreqMask::Fixed { height, width, values }) => {
                if values.len() != height * width {
                    return Err(Error::invalid("mask size does not match its dimensions"));
                }
                if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("mask values must lie in [0, 1]"));
                }
                let max = values.iter().fold(0.0f32, |m, &v| m.max(v));
                if max != 1.0 {
                    return Err(Error::invalid("mask maximum must be 1"));
                }
            }
            Some(FreqMask::HighFrequency { cutoff, low_mult }) => {
                if !(*cutoff > 0.0 && *cutoff <= 0.5) || !(0.0..=1.0).contains(low_mult) {
                    return Err(Error::invalid("high-frequency mask needs cutoff in (0, 0.5] and low_mult in [0, 1]"));
                }
            }
            None => {}
        }
        Ok(())
    }

    /// The H×W multiplier map for image `x`, if any.
    pub fn mask_for(&self, x: &Image) -> Result<Option<Image>> {
        match &self.freq_mask {
            None => Ok(None),
            Some(FreqMask::Fixed { height, width, values }) => {
                if (*height, *width) != (x.height(), x.width()) {
                    return Err(Error::shape(Shape::new(*height, *width, 1), Shape::new(x.height(), x.width(), 1)));
                }
                Ok(Some(Image::from_vec(Shape::new(*height, *width, 1), values.clone())?))
            }
            Some(FreqMask::HighFrequency { cutoff, low_mult }) => super::make_hf_mask(x, *cutoff, *low_mult).map(Some),
        }
    }

    /// Per-pixel radius `eta * mask`, broadcast over channels.
    pub fn caps(&self, shape: Shape, mask: Option<&Image>) -> Image {
        let eta = self.eta as f32;
        match mask {
            None => Image::filled(shape, eta),
            Some(m) => Image::from_fn(shape, |y, x, _| eta * m.get(y, x, 0)),
        }
    }
}

/// Projects `delta` onto `|delta| <= caps` and then onto `x + delta ∈ [0, 1]`.
pub fn project(x: &Image, delta: &mut Image, caps: &Image) {
    let xs = x.data();
    let cs = caps.data();
    for (i, d) in delta.data_mut().iter_mut().enumerate() {
        let v = d.clamp(-cs[i], cs[i]);
        *d = (xs[i] + v).clamp(0.0, 1.0) - xs[i];
    }
}

/// One signed ascent step `x + delta + alpha * sign(grad)` followed by
/// projection. Zero gradient entries leave the pixel in place.
pub fn pgd_update(x: &Image, delta: &mut Image, grad: &Image, alpha: f32, caps: &Image) {
    for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
        if g > 0.0 {
            *d += alpha;
        } else if g < 0.0 {
            *d -= alpha;
        }
    }
    project(x, delta, caps);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(v: f32) -> Image {
        Image::filled(Shape::new(1, 1, 1), v)
    }

    #[test]
    fn single_scalar_step() {
        let x = px(0.5);
        let mut d = px(0.0);
        pgd_update(&x, &mut d, &px(3.0), 0.005, &px(0.05));
        assert!((x.get(0, 0, 0) + d.get(0, 0, 0) - 0.505).abs() < 1e-7);
    }

    #[test]
    fn boundary_is_sticky() {
        let x = px(0.5);
        let mut d = px(0.05);
        pgd_update(&x, &mut d, &px(1.0), 0.005, &px(0.05));
        assert!((x.get(0, 0, 0) + d.get(0, 0, 0) - 0.55).abs() < 1e-7);
        let x = px(0.98);
        let mut d = px(0.0);
        pgd_update(&x, &mut d, &px(1.0), 0.005, &px(0.05));
        pgd_update(&x, &mut d, &px(1.0), 0.005, &px(0.05));
        pgd_update(&x, &mut d, &px(1.0), 0.005, &px(0.05));
        pgd_update(&x, &mut d, &px(1.0), 0.005, &px(0.05));
        pgd_update(&x, &mut d, &px(1.0), 0.005, &px(0.05));
        assert_eq!(x.get(0, 0, 0) + d.get(0, 0, 0), 1.0);
    }

    #[test]
    fn validation() {
        assert!(PerturbationBudget::default().validate().is_ok());
        assert!(PerturbationBudget { alpha_step: 0.1, ..Default::default() }.validate().is_err());
        assert!(PerturbationBudget { eta: 0.0, alpha_step: 0.1, ..Default::default() }.validate().is_ok());
        let half = FreqMask::Fixed { height: 1, width: 2, values: vec![0.5, 0.5] };
        assert!(PerturbationBudget { freq_mask: Some(half), ..Default::default() }.validate().is_err());
        let hf = FreqMask::HighFrequency { cutoff: 0.7, low_mult: 0.5 };
        assert!(PerturbationBudget { freq_mask: Some(hf), ..Default::default() }.validate().is_err());
    }
}
