use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::budget::{pgd_update, project, InitMode, PerturbationBudget};
use crate::diffusion::{denoising_loss, DenoiserModel, DiffusionSchedule, NoisedBatch, Token, UNet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{cast_params, first_non_finite, Real, Tensor};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimestepSelector {
    /// A fresh uniform timestep per image and step.
    Uniform,
    /// Score a fixed grid of candidate timesteps by the gradient norm of the
    /// conditional loss and draw only from the `k` best, per image.
    GreedyTopK { k: usize },
    /// Draw uniformly from the fixed window `lo..hi`.
    Window { lo: usize, hi: usize },
}

/// Candidates scored by the greedy selector: ten evenly spaced mid-points.
pub const GREEDY_CANDIDATES: usize = 10;

fn check_timesteps(ts: &[usize], schedule: &DiffusionSchedule) -> Result<()> {
    if ts.is_empty() {
        return Err(Error::Empty("timestep set"));
    }
    ts.iter().try_for_each(|&t| schedule.check_t(t))
}

/// Noise for timestep `t` depends only on `(seed, t)`, so the loss over a set
/// is the mean of the single-timestep losses.
fn matched_batch<T: Real>(x: &Image, token: Token, ts: &[usize], seed: u64) -> NoisedBatch<T> {
    let xs = vec![x; ts.len()];
    let x0 = Tensor::from_images(&xs, 2.0, -1.0);
    let mut eps = x0.clone();
    let plane = x0.spatial();
    for (n, &t) in ts.iter().enumerate() {
        let mut r = rng::rng(rng::derive(seed, t as u64));
        let noise = rng::gaussian_vec(plane * x0.c, &mut r);
        for c in 0..x0.c {
            let o = eps.at(c, n, 0, 0);
            for (i, e) in eps.data[o..o + plane].iter_mut().enumerate() {
                *e = T::of(noise[c * plane + i] as f64);
            }
        }
    }
    NoisedBatch { x0, eps, ts: ts.to_vec(), tokens: vec![token; ts.len()] }
}

/// Value and input gradient of the conditional loss in precision `T`.
pub fn cond_loss_grad<T: Real>(net: &UNet, params: &[T], x: &Image, token: Token, timesteps: &[usize], schedule: &DiffusionSchedule, seed: u64) -> Result<(f64, Image)> {
    check_timesteps(timesteps, schedule)?;
    let nb = matched_batch::<T>(x, token, timesteps, seed);
    net.check_inputs(&nb.x0, &nb.ts, &nb.tokens)?;
    let ev = denoising_loss(net, params, &nb, schedule, false, true);
    let g = ev.input_grad.expect("requested");
    let mut sum = g.to_image(0, 1.0, 0.0);
    for n in 1..g.n {
        sum = sum.zip_map(&g.to_image(n, 1.0, 0.0), |a, b| a + b)?;
    }
    Ok((ev.loss.f64(), sum))
}

/// Mean denoising loss of `x` under `token` over `timesteps`; the quantity
/// the perturbation ascends.
pub fn cond_loss(model: &DenoiserModel, x: &Image, token: Token, timesteps: &[usize], schedule: &DiffusionSchedule, seed: u64) -> Result<f64> {
    check_timesteps(timesteps, schedule)?;
    let nb = matched_batch::<f32>(x, token, timesteps, seed);
    model.net.check_inputs(&nb.x0, &nb.ts, &nb.tokens)?;
    Ok(denoising_loss(&model.net, &model.params, &nb, schedule, false, false).loss as f64)
}

/// `cond_loss_grad` at double precision, for gradient checks.
pub fn cond_loss_grad_f64(model: &DenoiserModel, x: &Image, token: Token, timesteps: &[usize], schedule: &DiffusionSchedule, seed: u64) -> Result<(f64, Image)> {
    cond_loss_grad(&model.net, &cast_params::<f64>(&model.params), x, token, timesteps, schedule, seed)
}

/// Starting perturbation, already projected.
pub fn init_delta(x: &Image, budget: &PerturbationBudget, caps: &Image, rng: &mut Rng) -> Image {
    let mut d = match budget.init_mode {
        InitMode::Zero => Image::zeros(x.shape()),
        InitMode::UniformInBall => {
            let cs = caps.data();
            let v = (0..cs.len()).map(|i| cs[i] * (2.0 * rng.random::<f32>() - 1.0)).collect();
            Image::from_vec(x.shape(), v).expect("shape")
        }
        InitMode::GaussianClipped => rng::gaussian_image(x.shape(), rng),
    };
    project(x, &mut d, caps);
    d
}

/// Per-image timestep pools; `None` means the whole schedule.
pub(crate) fn select_timesteps(
    model: &DenoiserModel,
    images: &[Image],
    token: Token,
    selector: &TimestepSelector,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<Option<Vec<usize>>>> {
    let k = match selector {
        TimestepSelector::Uniform => return Ok(vec![None; images.len()]),
        TimestepSelector::GreedyTopK { k } => *k,
        TimestepSelector::Window { lo, hi } => {
            if lo >= hi || *hi > schedule.t_max() {
                return Err(Error::invalid(format!("timestep window {lo}..{hi} is empty or outside the schedule")));
            }
            return Ok(vec![Some((*lo..*hi).collect()); images.len()]);
        }
    };
    if k == 0 || k > GREEDY_CANDIDATES {
        return Err(Error::invalid(format!("greedy k must lie in 1..={GREEDY_CANDIDATES}")));
    }
    let tm = schedule.t_max();
    let cands: Vec<usize> = (0..GREEDY_CANDIDATES).map(|i| ((2 * i + 1) * tm / (2 * GREEDY_CANDIDATES)).min(tm - 1)).collect();
    images
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let mut scored = Vec::with_capacity(cands.len());
            for &t in &cands {
                let (_, g) = cond_loss_grad(&model.net, &model.params, x, token, &[t], schedule, rng::derive(seed, j as u64))?;
                let norm: f64 = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
                scored.push((norm, t));
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            Ok(Some(scored.into_iter().take(k).map(|(_, t)| t).collect()))
        })
        .collect()
}

/// Runs `budget.pgd_steps` signed steps on every `deltas[j]` against a frozen
/// model. Each step uses one timestep per image drawn from its pool.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pgd_steps(
    model: &DenoiserModel,
    images: &[Image],
    deltas: &mut [Image],
    caps: &[Image],
    pools: &[Option<Vec<usize>>],
    token: Token,
    budget: &PerturbationBudget,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<()> {
    if budget.eta == 0.0 {
        return Ok(());
    }
    let alpha = budget.alpha_step as f32;
    let tokens = vec![token; images.len()];
    for step in 0..budget.pgd_steps {
        let adv: Vec<Image> = images.iter().zip(deltas.iter()).map(|(x, d)| x.zip_map(d, |a, b| a + b).expect("shape")).collect();
        let refs: Vec<&Image> = adv.iter().collect();
        let x0 = Tensor::<f32>::from_images(&refs, 2.0, -1.0);
        let ts: Vec<usize> = pools
            .iter()
            .map(|p| match p {
                Some(set) => set[rng.random_range(0..set.len())],
                None => rng.random_range(0..schedule.t_max()),
            })
            .collect();
        let eps = Tensor { data: rng::gaussian_vec(x0.data.len(), rng), ..x0.clone() };
        let nb = NoisedBatch { x0, eps, ts, tokens: tokens.clone() };
        let g = denoising_loss(&model.net, &model.params, &nb, schedule, false, true).input_grad.expect("requested");
        if let Some(i) = first_non_finite(&g.data) {
            return Err(Error::NonFinite { context: format!("input gradient at PGD step {step}"), index: i });
        }
        for (j, (x, d)) in images.iter().zip(deltas.iter_mut()).enumerate() {
            pgd_update(x, d, &g.to_image(j, 1.0, 0.0), alpha, &caps[j]);
        }
    }
    Ok(())
}

/// PGD against a fixed model for one image; returns the final perturbation.
pub fn pgd_attack(
    model: &DenoiserModel,
    x: &Image,
    token: Token,
    budget: &PerturbationBudget,
    selector: &TimestepSelector,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Image> {
    budget.validate()?;
    if !x.in_unit_range() {
        return Err(Error::invalid("image must lie in [0, 1]"));
    }
    if x.shape() != model.image_shape() {
        return Err(Error::shape(model.image_shape(), x.shape()));
    }
    if token >= model.vocab() {
        return Err(Error::UnknownToken(token));
    }
    let mask = budget.mask_for(x)?;
    let caps = budget.caps(x.shape(), mask.as_ref());
    let mut r = rng::rng(seed);
    let mut delta = init_delta(x, budget, &caps, &mut r);
    let imgs = std::slice::from_ref(x);
    let pools = select_timesteps(model, imgs, token, selector, schedule, rng::derive(seed, 1))?;
    pgd_steps(model, imgs, std::slice::from_mut(&mut delta), std::slice::from_ref(&caps), &pools, token, budget, schedule, &mut r)?;
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UNetConfig;
    use crate::image::Shape;

    fn model(h: usize) -> DenoiserModel {
        DenoiserModel::new(UNetConfig { height: h, width: h, channels: 1, widths: vec![4, 8], time_dim: 8, vocab: 2 }, 5).unwrap()
    }

    fn img(h: usize, k: usize) -> Image {
        Image::from_fn(Shape::new(h, h, 1), |y, x, _| ((y * 5 + x * 3 + k) % 9) as f32 / 9.0)
    }

    #[test]
    fn cond_loss_is_deterministic_and_mean_over_timesteps() {
        let m = model(8);
        let s = DiffusionSchedule::standard();
        let x = img(8, 1);
        let a = cond_loss(&m, &x, 1, &[40], &s, 3).unwrap();
        assert_eq!(a, cond_loss(&m, &x, 1, &[40], &s, 3).unwrap());
        let b = cond_loss(&m, &x, 1, &[700], &s, 3).unwrap();
        let both = cond_loss(&m, &x, 1, &[40, 700], &s, 3).unwrap();
        assert!((both - 0.5 * (a + b)).abs() < 1e-6 * both.abs().max(1.0));
        assert!(matches!(cond_loss(&m, &x, 1, &[], &s, 3), Err(Error::Empty(_))));
        assert!(cond_loss(&m, &x, 1, &[1000], &s, 3).is_err());
    }

    #[test]
    fn zero_radius_gives_zero_delta() {
        let m = model(8);
        let s = DiffusionSchedule::standard();
        let b = PerturbationBudget { eta: 0.0, ..Default::default() };
        let d = pgd_attack(&m, &img(8, 2), 1, &b, &TimestepSelector::Uniform, &s, 1).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attack_respects_budget_and_mask() {
        let m = model(8);
        let s = DiffusionSchedule::standard();
        let x = img(8, 3);
        for init in [InitMode::Zero, InitMode::UniformInBall, InitMode::GaussianClipped] {
            let b = PerturbationBudget { init_mode: init, ..Default::default() };
            let d = pgd_attack(&m, &x, 1, &b, &TimestepSelector::GreedyTopK { k: 2 }, &s, 4).unwrap();
            assert!(d.data().iter().all(|v| v.abs() <= 0.05 + 1e-6));
            assert!(x.zip_map(&d, |a, b| a + b).unwrap().in_unit_range());
        }
        let values: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { 0.25 }).collect();
        let b = PerturbationBudget { freq_mask: Some(super::super::FreqMask::Fixed { height: 8, width: 8, values: values.clone() }), ..Default::default() };
        let d = pgd_attack(&m, &x, 1, &b, &TimestepSelector::Uniform, &s, 4).unwrap();
        assert!(d.data().iter().zip(&values).all(|(v, m)| v.abs() <= 0.05 * m + 1e-6));
        assert!(pgd_attack(&m, &x, 5, &b, &TimestepSelector::Uniform, &s, 4).is_err());
    }

    #[test]
    fn greedy_pool_has_k_distinct_candidates() {
        let m = model(8);
        let s = DiffusionSchedule::standard();
        let pools = select_timesteps(&m, &[img(8, 0), img(8, 1)], 1, &TimestepSelector::GreedyTopK { k: 3 }, &s, 0).unwrap();
        for p in pools {
            let mut p = p.unwrap();
            p.sort();
            p.dedup();
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|t| t % 100 == 50));
        }
        assert!(select_timesteps(&m, &[img(8, 0)], 1, &TimestepSelector::GreedyTopK { k: 0 }, &s, 0).is_err());
    }

    #[test]
    fn window_pool_is_the_window() {
        let m = model(8);
        let s = DiffusionSchedule::standard();
        let pools = select_timesteps(&m, &[img(8, 0)], 1, &TimestepSelector::Window { lo: 100, hi: 400 }, &s, 0).unwrap();
        assert_eq!(pools[0].as_deref(), Some(&(100..400).collect::<Vec<_>>()[..]));
        assert!(select_timesteps(&m, &[img(8, 0)], 1, &TimestepSelector::Window { lo: 5, hi: 5 }, &s, 0).is_err());
        assert!(select_timesteps(&m, &[img(8, 0)], 1, &TimestepSelector::Window { lo: 0, hi: 1001 }, &s, 0).is_err());
    }

    #[test]
    fn gradient_signs_match_finite_differences() {
        let m = DenoiserModel::new(UNetConfig { height: 4, width: 4, channels: 1, widths: vec![3], time_dim: 4, vocab: 2 }, 2).unwrap();
        let s = DiffusionSchedule::standard();
        let (mut agree, mut total) = (0, 0);
        for k in 0..4 {
            let x = img(4, k).map(|v| 0.1 + 0.8 * v);
            let ts = [30 + 200 * k, 500];
            let (_, g) = cond_loss_grad_f64(&m, &x, 1, &ts, &s, k as u64).unwrap();
            let p64 = cast_params::<f64>(&m.params);
            for i in 0..16 {
                let h = 1e-3;
                let mut xp = x.clone();
                xp.data_mut()[i] += h as f32;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h as f32;
                let lp = cond_loss_grad(&m.net, &p64, &xp, 1, &ts, &s, k as u64).unwrap().0;
                let lm = cond_loss_grad(&m.net, &p64, &xm, 1, &ts, &s, k as u64).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                total += 1;
                if fd.signum() == (g.data()[i] as f64).signum() {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }
}
