use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::budget::{PerturbationBudget, BUDGET_TOL};
use super::pgd::{init_delta, pgd_steps, select_timesteps, TimestepSelector};
use crate::diffusion::{denoising_loss, DenoiserModel, DiffusionSchedule, NoisedBatch, Token, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{first_non_finite, Adam};
use crate::personalization::{finetune, FinetuneConfig, InstanceSet};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsplConfig {
    pub aspl_iters: usize,
    /// Steps for both the clone fine-tune and the persistent-surrogate update.
    pub surrogate_finetune_steps: usize,
    pub surrogate_lr: f64,
    #[serde(skip)]
    pub clean_ref_set: Vec<Image>,
    pub timestep_selector: TimestepSelector,
    pub seed: u64,
}

impl AsplConfig {
    pub fn new(clean_ref_set: Vec<Image>, seed: u64) -> Self {
        Self { aspl_iters: 50, surrogate_finetune_steps: 3, surrogate_lr: 1e-4, clean_ref_set, timestep_selector: TimestepSelector::Uniform, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clean_ref_set.is_empty() {
            return Err(Error::Empty("clean reference set"));
        }
        if self.aspl_iters == 0 {
            return Err(Error::invalid("aspl_iters must be at least 1"));
        }
        if !(self.surrogate_lr > 0.0 && self.surrogate_lr.is_finite()) {
            return Err(Error::invalid("surrogate learning rate must be positive"));
        }
        Ok(())
    }
}

/// How many times each stage of the loop ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsplCounters {
    pub clone_finetunes: usize,
    pub perturbation_updates: usize,
    pub surrogate_updates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedSet {
    pub originals: Vec<Image>,
    pub deltas: Vec<Image>,
    pub token: Token,
    pub budget: PerturbationBudget,
    /// Resolved per-image multiplier maps, when the budget is masked.
    pub masks: Vec<Option<Image>>,
    pub counters: AsplCounters,
}

impl ProtectedSet {
    pub fn protected(&self) -> Vec<Image> {
        self.originals.iter().zip(&self.deltas).map(|(x, d)| x.zip_map(d, |a, b| a + b).expect("shape")).collect()
    }

    pub fn max_abs_delta(&self) -> Vec<f32> {
        self.deltas.iter().map(|d| d.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))).collect()
    }

    /// Checks the budget and pixel-range invariants on every image.
    pub fn verify(&self) -> Result<()> {
        if self.originals.len() != self.deltas.len() || self.masks.len() != self.deltas.len() {
            return Err(Error::invalid("protected set lists disagree in length"));
        }
        for (i, ((x, d), m)) in self.originals.iter().zip(&self.deltas).zip(&self.masks).enumerate() {
            x.ensure_same_shape(d)?;
            let caps = self.budget.caps(x.shape(), m.as_ref());
            if let Some(k) = d.data().iter().zip(caps.data()).position(|(v, c)| v.abs() > c + BUDGET_TOL) {
                return Err(Error::invalid(format!("image {i}: |delta| = {} exceeds its budget at index {k}", d.data()[k].abs())));
            }
            if let Some(k) = x.data().iter().zip(d.data()).position(|(a, b)| !(0.0..=1.0).contains(&(a + b))) {
                return Err(Error::invalid(format!("image {i}: protected pixel {k} leaves [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Alternating surrogate and perturbation learning. Each iteration
/// (1) clones the surrogate and fine-tunes the clone on the clean reference
/// set, (2) runs PGD on every perturbation against the clone, and
/// (3) fine-tunes the persistent surrogate on the perturbed images.
pub fn aspl_defend(
    base: &DenoiserModel,
    protect_images: &[Image],
    token: Token,
    budget: &PerturbationBudget,
    config: &AsplConfig,
    schedule: &DiffusionSchedule,
) -> Result<ProtectedSet> {
    if protect_images.is_empty() {
        return Err(Error::Empty("images to protect"));
    }
    if token == NULL_TOKEN {
        return Err(Error::invalid("cannot protect the null token"));
    }
    budget.validate()?;
    config.validate()?;
    let shape = base.image_shape();
    if let Some(bad) = protect_images.iter().chain(&config.clean_ref_set).find(|i| i.shape() != shape) {
        return Err(Error::shape(shape, bad.shape()));
    }
    if protect_images.iter().any(|x| !x.in_unit_range()) {
        return Err(Error::invalid("images to protect must lie in [0, 1]"));
    }
    let masks = protect_images.iter().map(|x| budget.mask_for(x)).collect::<Result<Vec<_>>>()?;
    let caps: Vec<Image> = masks.iter().map(|m| budget.caps(shape, m.as_ref())).collect();
    let mut rng = rng::rng(config.seed);
    let mut deltas: Vec<Image> = protect_images.iter().zip(&caps).map(|(x, c)| init_delta(x, budget, c, &mut rng)).collect();

    let mut surrogate = base.clone();
    surrogate.ensure_token(token)?;
    let mut opt = Adam::<f32>::new(surrogate.params.len(), config.surrogate_lr);
    let refs = InstanceSet::new(config.clean_ref_set.clone(), token, "clean-reference")?;
    let mut counters = AsplCounters::default();
    let tokens = vec![token; protect_images.len()];
    let at = |it: usize| move |e: Error| match e {
        Error::NonFinite { context, index } => Error::NonFinite { context: format!("{context} (ASPL iteration {it})"), index },
        other => other,
    };

    for it in 0..config.aspl_iters {
        let ft = FinetuneConfig { learning_rate: config.surrogate_lr, steps: config.surrogate_finetune_steps, seed: rng::derive(config.seed, 2 * it as u64 + 1), ..FinetuneConfig::toy(0) };
        let clone = finetune(&surrogate, &refs, &ft, schedule).map_err(at(it))?;
        counters.clone_finetunes += 1;

        let adv: Vec<Image> = protect_images.iter().zip(&deltas).map(|(x, d)| x.zip_map(d, |a, b| a + b).expect("shape")).collect();
        let pools = select_timesteps(&clone, &adv, token, &config.timestep_selector, schedule, rng.random())?;
        pgd_steps(&clone, protect_images, &mut deltas, &caps, &pools, token, budget, schedule, &mut rng).map_err(at(it))?;
        counters.perturbation_updates += 1;

        for step in 0..config.surrogate_finetune_steps {
            let adv: Vec<Image> = protect_images.iter().zip(&deltas).map(|(x, d)| x.zip_map(d, |a, b| a + b).expect("shape")).collect();
            let refs_adv: Vec<&Image> = adv.iter().collect();
            let nb = NoisedBatch::draw(&refs_adv, &tokens, None, schedule, &mut rng);
            let ev = denoising_loss(&surrogate.net, &surrogate.params, &nb, schedule, true, false);
            let g = ev.param_grad.expect("requested");
            if !ev.loss.is_finite() || first_non_finite(&g).is_some() {
                return Err(Error::NonFinite { context: format!("surrogate update step {step} (ASPL iteration {it})"), index: step });
            }
            opt.step(&mut surrogate.params, &g);
        }
        counters.surrogate_updates += 1;
    }
    let set = ProtectedSet { originals: protect_images.to_vec(), deltas, token, budget: budget.clone(), masks, counters };
    set.verify()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::InitMode;
    use crate::diffusion::UNetConfig;
    use crate::image::Shape;

    fn model() -> DenoiserModel {
        DenoiserModel::new(UNetConfig { height: 8, width: 8, channels: 1, widths: vec![4, 8], time_dim: 8, vocab: 2 }, 5).unwrap()
    }

    fn imgs(k: usize, off: usize) -> Vec<Image> {
        (0..k).map(|i| Image::from_fn(Shape::new(8, 8, 1), |y, x, _| ((y * 3 + x * 5 + i + off) % 7) as f32 / 6.0)).collect()
    }

    #[test]
    fn counters_match_iterations_and_budget_holds() {
        let s = DiffusionSchedule::standard();
        let cfg = AsplConfig { aspl_iters: 3, surrogate_finetune_steps: 2, ..AsplConfig::new(imgs(2, 10), 4) };
        let set = aspl_defend(&model(), &imgs(3, 0), 2, &PerturbationBudget::default(), &cfg, &s).unwrap();
        assert_eq!(set.counters, AsplCounters { clone_finetunes: 3, perturbation_updates: 3, surrogate_updates: 3 });
        assert!(set.max_abs_delta().iter().all(|&m| m <= 0.05 + 1e-6));
        set.verify().unwrap();
        let again = aspl_defend(&model(), &imgs(3, 0), 2, &PerturbationBudget::default(), &cfg, &s).unwrap();
        assert_eq!(again.deltas, set.deltas);
    }

    #[test]
    fn no_pgd_steps_keeps_initialization() {
        let s = DiffusionSchedule::standard();
        let cfg = AsplConfig { aspl_iters: 1, surrogate_finetune_steps: 1, ..AsplConfig::new(imgs(2, 10), 4) };
        let b = PerturbationBudget { pgd_steps: 0, init_mode: InitMode::Zero, ..Default::default() };
        let set = aspl_defend(&model(), &imgs(2, 0), 1, &b, &cfg, &s).unwrap();
        assert!(set.deltas.iter().all(|d| d.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn verify_catches_violations() {
        let s = DiffusionSchedule::standard();
        let cfg = AsplConfig { aspl_iters: 1, surrogate_finetune_steps: 1, ..AsplConfig::new(imgs(1, 10), 4) };
        let mut set = aspl_defend(&model(), &imgs(1, 0), 1, &PerturbationBudget::default(), &cfg, &s).unwrap();
        set.deltas[0].data_mut()[5] = 0.2;
        assert!(set.verify().is_err());
        assert!(aspl_defend(&model(), &[], 1, &PerturbationBudget::default(), &cfg, &s).is_err());
        assert!(aspl_defend(&model(), &imgs(1, 0), 1, &PerturbationBudget::default(), &AsplConfig::new(vec![], 0), &s).is_err());
    }
}
