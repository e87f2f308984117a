use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserModel, DiffusionSchedule, Token, UNet, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{first_non_finite, ema_update, Adam, Real, Tensor};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing a sample's token with the null token.
    #[serde(default)]
    pub cond_dropout: f64,
    /// Return an exponential moving average of the weights instead of the
    /// raw iterate.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    /// Cosine learning-rate decay to zero over `steps`.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        Self { learning_rate, steps, batch_size, seed, cond_dropout: 0.0, ema_decay: None, cosine_decay: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("condition dropout must lie in [0, 1]"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid("ema decay must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// A noised batch ready for the denoising objective.
#[derive(Clone, Debug)]
pub struct NoisedBatch<T> {
    /// Clean images on the internal scale.
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    pub ts: Vec<usize>,
    pub tokens: Vec<Token>,
}

impl<T: Real> NoisedBatch<T> {
    /// Draws timesteps uniformly from `timesteps` (or the whole schedule when
    /// `None`) and Gaussian noise from `rng`.
    pub fn draw(images: &[&Image], tokens: &[Token], timesteps: Option<&[usize]>, schedule: &DiffusionSchedule, rng: &mut Rng) -> Self {
        let x0 = Tensor::from_images(images, 2.0, -1.0);
        let ts = (0..images.len())
            .map(|_| match timesteps {
                Some(set) => set[rng.random_range(0..set.len())],
                None => rng.random_range(0..schedule.t_max()),
            })
            .collect();
        let eps_data = rng::gaussian_vec(x0.data.len(), rng).into_iter().map(|v| T::of(v as f64)).collect();
        let eps = Tensor { data: eps_data, ..x0.clone() };
        Self { x0, eps, ts, tokens: tokens.to_vec() }
    }
}

/// Value and requested gradients of the denoising objective.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    pub loss: T,
    pub param_grad: Option<Vec<T>>,
    /// Gradient w.r.t. the clean images on the [0, 1] scale.
    pub input_grad: Option<Tensor<T>>,
}

/// Mean squared error between predicted and true noise, with optional
/// gradients w.r.t. parameters and clean inputs.
pub fn denoising_loss<T: Real>(
    net: &UNet,
    params: &[T],
    batch: &NoisedBatch<T>,
    schedule: &DiffusionSchedule,
    want_params: bool,
    want_input: bool,
) -> LossEval<T> {
    let x0 = &batch.x0;
    let plane = x0.spatial();
    let mut xt = x0.clone();
    for c in 0..x0.c {
        for (s, &t) in batch.ts.iter().enumerate() {
            let ab = schedule.alpha_bars()[t];
            let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
            let o = x0.at(c, s, 0, 0);
            for i in o..o + plane {
                xt.data[i] = a * x0.data[i] + b * batch.eps.data[i];
            }
        }
    }
    let (pred, cache) = net.forward(params, &xt, &batch.ts, &batch.tokens, (0, 0));
    let count = T::of(pred.data.len() as f64);
    let mut loss = T::zero();
    let mut dy = pred.clone();
    for ((d, &p), &e) in dy.data.iter_mut().zip(&pred.data).zip(&batch.eps.data) {
        let r = p - e;
        loss += r * r;
        *d = T::of(2.0) * r / count;
    }
    loss = loss / count;
    if !want_params && !want_input {
        return LossEval { loss, param_grad: None, input_grad: None };
    }
    let (pg, dxt) = net.backward(params, &cache, &dy, want_input);
    let input_grad = dxt.map(|mut g| {
        // x_t = sqrt(abar) * (2u - 1) + ..., so d/du = 2 sqrt(abar) d/dx_t.
        for c in 0..g.c {
            for (s, &t) in batch.ts.iter().enumerate() {
                let k = T::of(2.0 * schedule.alpha_bars()[t].sqrt());
                let o = g.at(c, s, 0, 0);
                for v in &mut g.data[o..o + plane] {
                    *v *= k;
                }
            }
        }
        g
    });
    LossEval { loss, param_grad: want_params.then_some(pg), input_grad }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub losses: Vec<f64>,
}

/// Trains on `(image, token)` pairs with the noise-prediction objective.
pub fn train(model: &DenoiserModel, dataset: &[(Image, Token)], config: &TrainConfig, schedule: &DiffusionSchedule) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    config.validate()?;
    let shape = model.image_shape();
    for (img, tok) in dataset {
        if img.shape() != shape {
            return Err(Error::shape(shape, img.shape()));
        }
        if !img.in_unit_range() {
            return Err(Error::invalid("training images must lie in [0, 1]"));
        }
        if *tok >= model.vocab() {
            return Err(Error::UnknownToken(*tok));
        }
    }
    let mut out = model.clone();
    let mut ema = config.ema_decay.map(|_| model.params.clone());
    let mut opt = Adam::<f32>::new(out.params.len(), config.learning_rate);
    let mut rng = rng::rng(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if config.cosine_decay {
            opt.lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
        }
        let mut imgs = Vec::with_capacity(config.batch_size);
        let mut toks = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let (img, tok) = &dataset[rng.random_range(0..dataset.len())];
            imgs.push(img);
            toks.push(if config.cond_dropout > 0.0 && rng.random::<f64>() < config.cond_dropout { NULL_TOKEN } else { *tok });
        }
        let batch = NoisedBatch::draw(&imgs, &toks, None, schedule, &mut rng);
        let eval = denoising_loss(&out.net, &out.params, &batch, schedule, true, false);
        let grads = eval.param_grad.expect("requested");
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite { context: format!("training loss at step {step}"), index: step });
        }
        if let Some(i) = first_non_finite(&grads) {
            return Err(Error::NonFinite { context: format!("parameter gradient at step {step}"), index: i });
        }
        opt.step(&mut out.params, &grads);
        if let (Some(shadow), Some(d)) = (ema.as_mut(), config.ema_decay) {
            ema_update(shadow, &out.params, d);
        }
        losses.push(eval.loss as f64);
    }
    if let Some(shadow) = ema {
        if config.steps > 0 {
            out.params = shadow;
        }
    }
    Ok(TrainOutcome { model: out, losses })
}

/// Packs a list of images with a shared token, for convenience.
pub fn with_token(images: &[Image], token: Token) -> Vec<(Image, Token)> {
    images.iter().map(|i| (i.clone(), token)).collect()
}
