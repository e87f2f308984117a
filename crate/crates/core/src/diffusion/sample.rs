use crate::diffusion::{from_internal, to_internal, DenoiserModel, DiffusionSchedule, Token};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Tensor;
use crate::rng::{self, Rng};

/// Anything that predicts the noise in a batch on the internal scale.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &Tensor<f32>, ts: &[usize], tokens: &[Token], origin: (usize, usize)) -> Result<Tensor<f32>>;
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x: &Tensor<f32>, ts: &[usize], tokens: &[Token], origin: (usize, usize)) -> Result<Tensor<f32>> {
        self.predict(x, ts, tokens, origin)
    }
}

/// One ancestral step on an internal-scale batch. `t` counts from 1 (the step
/// that produces `x_{t-1}` from `x_t`); no noise is added when `t == 1`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    model: &P,
    x: &Tensor<f32>,
    t: usize,
    tokens: &[Token],
    origin: (usize, usize),
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    if t == 0 || t > schedule.t_max() {
        return Err(Error::TimestepOutOfRange { t, t_max: schedule.t_max() });
    }
    let idx = t - 1;
    let eps = model.predict_noise(x, &vec![idx; x.n], tokens, origin)?;
    let (ms, es, sigma) = schedule.posterior(idx);
    let (ms, es, sigma) = (ms as f32, es as f32, sigma as f32);
    let mut out = x.clone();
    for (o, (&xv, &ev)) in out.data.iter_mut().zip(x.data.iter().zip(&eps.data)) {
        *o = ms * (xv - es * ev);
    }
    if sigma > 0.0 {
        for (o, z) in out.data.iter_mut().zip(rng::gaussian_vec(x.data.len(), rng)) {
            *o += sigma * z;
        }
    }
    Ok(out)
}

/// Runs steps `t_from, t_from - 1, ..., 1` and returns `x_0` (internal scale).
pub fn reverse_from<P: NoisePredictor + ?Sized>(
    model: &P,
    mut x: Tensor<f32>,
    t_from: usize,
    tokens: &[Token],
    origin: (usize, usize),
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    for t in (1..=t_from).rev() {
        x = reverse_step(model, &x, t, tokens, origin, schedule, rng)?;
    }
    Ok(x)
}

/// Single-image reverse step on the public [0,1] scale (no clamping, since
/// intermediate states are not images).
pub fn denoise_step<P: NoisePredictor + ?Sized>(model: &P, x_t: &Image, t: usize, cond: Token, schedule: &DiffusionSchedule, rng: &mut Rng) -> Result<Image> {
    let x = to_internal(&[x_t]);
    let y = reverse_step(model, &x, t, &[cond], (0, 0), schedule, rng)?;
    Ok(from_internal(&y).remove(0))
}

/// Full reverse diffusion from pure noise, clamped to [0, 1].
pub fn sample(model: &DenoiserModel, token: Token, n: usize, seed: u64, schedule: &DiffusionSchedule) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if token >= model.vocab() {
        return Err(Error::UnknownToken(token));
    }
    let s = model.image_shape();
    let mut rng = rng::rng(seed);
    let x = Tensor { c: s.channels, n, h: s.height, w: s.width, data: rng::gaussian_vec(s.len() * n, &mut rng) };
    let x0 = reverse_from(model, x, schedule.t_max(), &vec![token; n], (0, 0), schedule, &mut rng)?;
    Ok(from_internal(&x0).into_iter().map(|i| i.clamp01()).collect())
}
