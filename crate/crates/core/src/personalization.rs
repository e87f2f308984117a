//! Few-shot personalization: bind a condition token to a handful of instance
//! images, then sample from the tuned model.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoising_loss, sample, DenoiserModel, DiffusionSchedule, NoisedBatch, Token, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{first_non_finite, Adam};
use crate::rng::{self, Rng};

pub const MAX_INSTANCES: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub images: Vec<Image>,
    pub token: Token,
    pub identity_id: String,
}

impl InstanceSet {
    pub fn new(images: Vec<Image>, token: Token, identity_id: impl Into<String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("instance set"));
        }
        if images.len() > MAX_INSTANCES {
            return Err(Error::invalid(format!("at most {MAX_INSTANCES} instance images, got {}", images.len())));
        }
        let shape = images[0].shape();
        if let Some(bad) = images.iter().find(|i| i.shape() != shape) {
            return Err(Error::shape(shape, bad.shape()));
        }
        Ok(Self { images, token, identity_id: identity_id.into() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Weight of the class-prior term; the prior images are paired with the
    /// null token.
    #[serde(default)]
    pub prior_weight: f64,
    #[serde(skip)]
    pub prior_images: Vec<Image>,
    pub seed: u64,
    /// Samples per step; `None` uses the instance count.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl FinetuneConfig {
    /// Defaults sized for the ~100k-parameter toy denoiser.
    pub fn toy(seed: u64) -> Self {
        Self { learning_rate: 1e-4, steps: 300, prior_weight: 0.0, prior_images: vec![], seed, batch_size: None }
    }

    /// The full-scale reference setting for a billion-parameter generator:
    /// learning rate 5e-7 for 1000 steps. Recorded for comparison; far too
    /// small a step for the toy model.
    pub fn full_scale_reference(seed: u64) -> Self {
        Self { learning_rate: 5e-7, steps: 1000, ..Self::toy(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::invalid("prior weight must be non-negative"));
        }
        if self.prior_weight > 0.0 && self.prior_images.is_empty() {
            return Err(Error::invalid("prior weight > 0 needs prior images"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

fn check_finite_inputs(batch: &[(Image, Token)]) -> Result<()> {
    if let Some(i) = batch.iter().position(|(img, _)| !img.is_finite()) {
        return Err(Error::NonFinite { context: "instance batch".into(), index: i });
    }
    Ok(())
}

struct Terms {
    loss: f64,
    grad: Vec<f32>,
}

fn objective(model: &DenoiserModel, batch: &[(Image, Token)], prior: Option<&[(Image, Token)]>, prior_weight: f64, schedule: &DiffusionSchedule, rng: &mut Rng, want_grad: bool) -> Result<Terms> {
    if batch.is_empty() {
        return Err(Error::Empty("instance batch"));
    }
    check_finite_inputs(batch)?;
    let eval_part = |part: &[(Image, Token)], rng: &mut Rng| {
        let imgs: Vec<&Image> = part.iter().map(|(i, _)| i).collect();
        let toks: Vec<Token> = part.iter().map(|(_, t)| *t).collect();
        let nb = NoisedBatch::<f32>::draw(&imgs, &toks, None, schedule, rng);
        denoising_loss(&model.net, &model.params, &nb, schedule, want_grad, false)
    };
    let inst = eval_part(batch, rng);
    if !inst.loss.is_finite() {
        return Err(Error::NonFinite { context: "instance loss".into(), index: 0 });
    }
    let mut loss = inst.loss as f64;
    let mut grad = inst.param_grad.unwrap_or_default();
    if let Some(p) = prior.filter(|p| prior_weight > 0.0 && !p.is_empty()) {
        check_finite_inputs(p)?;
        let pe = eval_part(p, rng);
        if !pe.loss.is_finite() {
            return Err(Error::NonFinite { context: "prior loss".into(), index: 0 });
        }
        loss += prior_weight * pe.loss as f64;
        if let Some(pg) = pe.param_grad {
            let w = prior_weight as f32;
            for (g, v) in grad.iter_mut().zip(pg) {
                *g += w * v;
            }
        }
    }
    Ok(Terms { loss, grad })
}

/// Instance denoising loss plus `prior_weight` times the prior denoising
/// loss. Deterministic in `rng_seed`.
pub fn dreambooth_loss(
    model: &DenoiserModel,
    batch: &[(Image, Token)],
    prior_batch: Option<&[(Image, Token)]>,
    prior_weight: f64,
    schedule: &DiffusionSchedule,
    rng_seed: u64,
) -> Result<f64> {
    let mut rng = rng::rng(rng_seed);
    Ok(objective(model, batch, prior_batch, prior_weight, schedule, &mut rng, false)?.loss)
}

/// Fine-tunes a copy of `base` so that `instances.token` generates the
/// instance identity. A token missing from the vocabulary is added, starting
/// from the null token's embedding.
pub fn finetune(base: &DenoiserModel, instances: &InstanceSet, config: &FinetuneConfig, schedule: &DiffusionSchedule) -> Result<DenoiserModel> {
    config.validate()?;
    if instances.images.is_empty() {
        return Err(Error::Empty("instance set"));
    }
    if instances.token == NULL_TOKEN {
        return Err(Error::invalid("the null token cannot be personalized"));
    }
    let mut model = base.clone();
    model.ensure_token(instances.token)?;
    let shape = model.image_shape();
    if let Some(bad) = instances.images.iter().chain(&config.prior_images).find(|i| i.shape() != shape) {
        return Err(Error::shape(shape, bad.shape()));
    }
    let bs = config.batch_size.unwrap_or(instances.images.len());
    let mut opt = Adam::<f32>::new(model.params.len(), config.learning_rate);
    let mut rng = rng::rng(config.seed);
    for step in 0..config.steps {
        let batch: Vec<(Image, Token)> = (0..bs).map(|_| (instances.images[rng.random_range(0..instances.images.len())].clone(), instances.token)).collect();
        let prior: Vec<(Image, Token)> = if config.prior_weight > 0.0 {
            (0..bs).map(|_| (config.prior_images[rng.random_range(0..config.prior_images.len())].clone(), NULL_TOKEN)).collect()
        } else {
            vec![]
        };
        let terms = objective(&model, &batch, Some(&prior), config.prior_weight, schedule, &mut rng, true).map_err(|e| match e {
            Error::NonFinite { context, index } => Error::NonFinite { context: format!("{context} at fine-tune step {step}"), index },
            other => other,
        })?;
        if let Some(i) = first_non_finite(&terms.grad) {
            return Err(Error::NonFinite { context: format!("fine-tune gradient at step {step}"), index: i });
        }
        opt.step(&mut model.params, &terms.grad);
    }
    Ok(model)
}

/// `n` samples conditioned on `token`, clamped to [0, 1].
pub fn generate(model: &DenoiserModel, token: Token, n: usize, seed: u64, schedule: &DiffusionSchedule) -> Result<Vec<Image>> {
    sample(model, token, n, seed, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UNetConfig;
    use crate::image::Shape;

    fn model() -> DenoiserModel {
        DenoiserModel::new(UNetConfig { height: 8, width: 8, channels: 1, widths: vec![4, 8], time_dim: 8, vocab: 2 }, 3).unwrap()
    }

    fn imgs(k: usize) -> Vec<Image> {
        (0..k).map(|i| Image::from_fn(Shape::new(8, 8, 1), |y, x, _| ((y * 3 + x + i) % 5) as f32 / 5.0)).collect()
    }

    #[test]
    fn zero_prior_weight_is_plain_denoising_loss() {
        let m = model();
        let s = DiffusionSchedule::standard();
        let batch: Vec<_> = imgs(3).into_iter().map(|i| (i, 1)).collect();
        let prior: Vec<_> = imgs(2).into_iter().map(|i| (i, 0)).collect();
        let a = dreambooth_loss(&m, &batch, Some(&prior), 0.0, &s, 5).unwrap();
        let b = dreambooth_loss(&m, &batch, None, 0.0, &s, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, dreambooth_loss(&m, &batch, None, 0.0, &s, 5).unwrap());
        let refs: Vec<&Image> = batch.iter().map(|(i, _)| i).collect();
        let nb = NoisedBatch::<f32>::draw(&refs, &[1, 1, 1], None, &s, &mut rng::rng(5));
        let plain = denoising_loss(&m.net, &m.params, &nb, &s, false, false).loss as f64;
        assert_eq!(a, plain);
    }

    #[test]
    fn prior_term_is_linear_in_weight() {
        let m = model();
        let s = DiffusionSchedule::standard();
        let batch: Vec<_> = imgs(2).into_iter().map(|i| (i, 1)).collect();
        let prior: Vec<_> = imgs(2).into_iter().map(|i| (i, 0)).collect();
        let l0 = dreambooth_loss(&m, &batch, Some(&prior), 0.0, &s, 9).unwrap();
        let l1 = dreambooth_loss(&m, &batch, Some(&prior), 1.0, &s, 9).unwrap();
        let l2 = dreambooth_loss(&m, &batch, Some(&prior), 2.0, &s, 9).unwrap();
        assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-9);
    }

    #[test]
    fn finetune_leaves_base_untouched_and_adds_token() {
        let m = model();
        let before = m.checksum();
        let set = InstanceSet::new(imgs(3), 4, "x").unwrap();
        let cfg = FinetuneConfig { steps: 3, ..FinetuneConfig::toy(1) };
        let s = DiffusionSchedule::standard();
        let tuned = finetune(&m, &set, &cfg, &s).unwrap();
        assert_eq!(m.checksum(), before);
        assert_eq!(tuned.vocab(), 5);
        let again = finetune(&m, &set, &cfg, &s).unwrap();
        assert_eq!(tuned.params, again.params);
        let none = finetune(&m, &set, &FinetuneConfig { steps: 0, ..cfg }, &s).unwrap();
        let mut grown = m.clone();
        grown.ensure_token(4).unwrap();
        assert_eq!(none.params, grown.params);
    }

    #[test]
    fn config_and_set_validation() {
        assert!(InstanceSet::new(vec![], 1, "x").is_err());
        assert!(InstanceSet::new(imgs(33), 1, "x").is_err());
        let cfg = FinetuneConfig { prior_weight: 1.0, ..FinetuneConfig::toy(0) };
        assert!(cfg.validate().is_err());
        assert_eq!(FinetuneConfig::full_scale_reference(0).steps, 1000);
    }

    #[test]
    fn generate_is_deterministic_and_checks_token() {
        let m = model();
        let s = DiffusionSchedule::linear(20, 1e-3, 0.2).unwrap();
        let a = generate(&m, 1, 1, 4, &s).unwrap();
        assert_eq!(a, generate(&m, 1, 1, 4, &s).unwrap());
        assert!(a[0].in_unit_range());
        assert!(matches!(generate(&m, 7, 1, 4, &s), Err(Error::UnknownToken(7))));
        assert!(generate(&m, 1, 0, 4, &s).is_err());
    }
}
