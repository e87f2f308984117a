use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Noise-level algebra for a linear beta ramp.
///
/// Index `t` runs over `0..t_max`; `alpha_bars[t]` is the fraction of signal
/// power left after `t + 1` forward steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!("beta bounds must satisfy 0 < {beta_start} <= {beta_end} < 1")));
        }
        let betas: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64).collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { beta_start, beta_end, betas, alphas, alpha_bars })
    }

    /// 1000 steps, beta in [1e-4, 0.02].
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_max() {
            return Err(Error::TimestepOutOfRange { t, t_max: self.t_max() });
        }
        Ok(())
    }

    /// Coefficients `(mean_scale, eps_scale, sigma)` of one ancestral step
    /// from index `t`: `x_prev = mean_scale * (x - eps_scale * eps_hat) + sigma * z`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (a, b, ab) = (self.alphas[t], self.betas[t], self.alpha_bars[t]);
        let sigma = if t == 0 {
            0.0
        } else {
            (b * (1.0 - self.alpha_bars[t - 1]) / (1.0 - ab)).sqrt()
        };
        (1.0 / a.sqrt(), b / (1.0 - ab).sqrt(), sigma)
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`, no clipping.
    pub fn forward_noise(&self, x0: &Image, t: usize, eps: &Image) -> Result<Image> {
        self.check_t(t)?;
        forward_noise_with(x0, self.alpha_bars[t], eps)
    }
}

/// Forward noising for an explicit `abar`.
pub fn forward_noise_with(x0: &Image, alpha_bar: f64, eps: &Image) -> Result<Image> {
    let (s, n) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    x0.zip_map(eps, |x, e| s * x + n * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use proptest::prelude::*;

    #[test]
    fn trivial_products() {
        let s = DiffusionSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        let s = DiffusionSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars()[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn standard_schedule_matches_log_sum() {
        let s = DiffusionSchedule::standard();
        let mut log_sum = 0.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            log_sum += (1.0 - beta).ln();
        }
        let reference = log_sum.exp();
        assert!(((s.alpha_bars()[999] - reference) / reference).abs() < 1e-10);
        assert!(s.alpha_bars()[999] < 1e-4);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(DiffusionSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::linear(0, 0.1, 0.1).is_err());
    }

    #[test]
    fn forward_noise_closed_form() {
        let sh = Shape::new(2, 2, 1);
        let x = Image::filled(sh, 0.8);
        let e = Image::filled(sh, 0.4);
        let y = forward_noise_with(&x, 0.25, &e).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.746_41).abs() < 1e-5));
        assert_eq!(forward_noise_with(&x, 1.0, &e).unwrap(), x);
        assert_eq!(forward_noise_with(&x, 0.0, &e).unwrap(), e);
        assert!(forward_noise_with(&x, 0.5, &Image::zeros(Shape::new(3, 2, 1))).is_err());
    }

    #[test]
    fn posterior_has_no_noise_at_last_step() {
        let s = DiffusionSchedule::standard();
        assert_eq!(s.posterior(0).2, 0.0);
        assert!(s.posterior(10).2 > 0.0);
    }

    proptest! {
        #[test]
        fn schedule_invariants(t_max in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.3) {
            let hi = (lo + span).min(0.99);
            let s = DiffusionSchedule::linear(t_max, lo, hi).unwrap();
            let mut prod = 1.0f64;
            for t in 0..t_max {
                prop_assert!(s.betas()[t] > 0.0 && s.betas()[t] < 1.0);
                prod *= s.alphas()[t];
                prop_assert!(((s.alpha_bars()[t] - prod) / prod).abs() < 1e-10);
                if t > 0 {
                    prop_assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
                }
            }
        }
    }
}
