use serde::{Deserialize, Serialize};

use crate::diffusion::{from_internal, reverse_from, to_internal, DenoiserModel, DiffusionSchedule, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Tensor;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffPureParams {
    pub t_star: usize,
}

impl Default for DiffPureParams {
    fn default() -> Self {
        Self { t_star: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPureParams {
    pub patch: usize,
    pub stride: usize,
    /// Weight on the previous iterate in the blend.
    pub gamma: f64,
    pub outer_iters: usize,
    pub t_small: usize,
}

impl GridPureParams {
    /// Half-size patches at half-patch stride, `gamma = 0.1`, ten rounds of
    /// light (t = 10) purification.
    pub fn for_size(size: usize) -> Self {
        let patch = (size / 2).max(1);
        Self { patch, stride: (patch / 2).max(1), gamma: 0.1, outer_iters: 10, t_small: 10 }
    }
}

/// Noises `x` (internal scale, any batch) to level `t_star` and denoises back
/// with the null token. `t_star` counts reverse steps; 0 is a no-op.
fn purify_tensor(model: &DenoiserModel, x: &Tensor<f32>, t_star: usize, origin: (usize, usize), schedule: &DiffusionSchedule, rng: &mut Rng) -> Result<Tensor<f32>> {
    if t_star == 0 {
        return Ok(x.clone());
    }
    let ab = schedule.alpha_bars()[t_star - 1];
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let eps = rng::gaussian_vec(x.data.len(), rng);
    let xt = Tensor { data: x.data.iter().zip(&eps).map(|(&v, &e)| a * v + b * e).collect(), ..x.clone() };
    reverse_from(model, xt, t_star, &vec![NULL_TOKEN; x.n], origin, schedule, rng)
}

fn check_t(t: usize, schedule: &DiffusionSchedule) -> Result<()> {
    if t >= schedule.t_max() {
        return Err(Error::TimestepOutOfRange { t, t_max: schedule.t_max() });
    }
    Ok(())
}

/// Forward-noise to `t_star`, reverse-denoise unconditionally, clamp.
pub fn diffpure(model: &DenoiserModel, x: &Image, t_star: usize, schedule: &DiffusionSchedule, seed: u64) -> Result<Image> {
    check_t(t_star, schedule)?;
    if t_star == 0 {
        return Ok(x.clone());
    }
    if x.shape() != model.image_shape() {
        return Err(Error::shape(model.image_shape(), x.shape()));
    }
    let mut rng = rng::rng(seed);
    let y = purify_tensor(model, &to_internal(&[x]), t_star, (0, 0), schedule, &mut rng)?;
    Ok(from_internal(&y).remove(0).clamp01())
}

/// Row-major tiling; the last row and column are snapped to the image edge.
pub fn grid_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..).map(|i| i * stride).take_while(|&v| v + patch <= len).collect();
    if o.last().map_or(true, |&l| l + patch < len) {
        o.push(len - patch);
    }
    o
}

pub fn extract_grids(x: &Image, patch: usize, stride: usize) -> Result<Vec<(Image, (usize, usize))>> {
    if patch == 0 || patch > x.height().min(x.width()) {
        return Err(Error::invalid(format!("patch {patch} does not fit a {}x{} image", x.height(), x.width())));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let mut out = Vec::new();
    for &y in &grid_origins(x.height(), patch, stride) {
        for &xx in &grid_origins(x.width(), patch, stride) {
            out.push((x.crop(y, xx, patch, patch)?, (y, xx)));
        }
    }
    Ok(out)
}

/// Per-pixel mean over every patch that covers it.
pub fn merge_grids(patches: &[(Image, (usize, usize))], h: usize, w: usize) -> Result<Image> {
    let first = patches.first().ok_or(Error::Empty("patch list"))?;
    let c = first.0.channels();
    let mut sum = vec![0.0f64; h * w * c];
    let mut count = vec![0u32; h * w];
    for (p, (oy, ox)) in patches {
        if p.channels() != c || oy + p.height() > h || ox + p.width() > w {
            return Err(Error::invalid(format!("patch at ({oy}, {ox}) does not fit a {h}x{w}x{c} canvas")));
        }
        for y in 0..p.height() {
            for x in 0..p.width() {
                count[(oy + y) * w + ox + x] += 1;
                for ch in 0..c {
                    sum[(ch * h + oy + y) * w + ox + x] += p.get(y, x, ch) as f64;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("pixel ({}, {}) is not covered by any patch", i / w, i % w)));
    }
    let shape = crate::image::Shape::new(h, w, c);
    Ok(Image::from_fn(shape, |y, x, ch| (sum[(ch * h + y) * w + x] / count[y * w + x] as f64) as f32))
}

/// `(1 - gamma) * purified + gamma * previous`.
pub fn blend(purified: &Image, previous: &Image, gamma: f64) -> Result<Image> {
    let g = gamma as f32;
    purified.zip_map(previous, |p, x| (1.0 - g) * p + g * x)
}

impl GridPureParams {
    pub fn validate(&self, schedule: &DiffusionSchedule, h: usize, w: usize) -> Result<()> {
        if self.patch == 0 || self.patch > h.min(w) {
            return Err(Error::invalid(format!("patch {} does not fit {h}x{w}", self.patch)));
        }
        if self.stride == 0 || self.stride > self.patch {
            return Err(Error::invalid("stride must lie in 1..=patch"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1]"));
        }
        check_t(self.t_small, schedule)
    }
}

/// Grid-wise iterative purification: each round purifies every patch at
/// `t_small`, averages overlaps, then blends with the previous iterate.
pub fn gridpure(model: &DenoiserModel, x: &Image, p: &GridPureParams, schedule: &DiffusionSchedule, seed: u64) -> Result<Image> {
    p.validate(schedule, x.height(), x.width())?;
    if x.shape() != model.image_shape() {
        return Err(Error::shape(model.image_shape(), x.shape()));
    }
    let mut rng = rng::rng(seed);
    let mut cur = x.clone();
    for _ in 0..p.outer_iters {
        if p.gamma >= 1.0 {
            break;
        }
        let patches = extract_grids(&cur, p.patch, p.stride)?;
        let mut cleaned = Vec::with_capacity(patches.len());
        for (img, origin) in &patches {
            let y = purify_tensor(model, &to_internal(&[img]), p.t_small, *origin, schedule, &mut rng)?;
            cleaned.push((from_internal(&y).remove(0).clamp01(), *origin));
        }
        let merged = merge_grids(&cleaned, x.height(), x.width())?;
        cur = blend(&merged, &cur, p.gamma)?;
    }
    Ok(cur)
}
