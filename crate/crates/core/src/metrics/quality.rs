//! BRISQUE-style naturalness distance: generalized-Gaussian fits to MSCN
//! coefficients and their neighbor products, compared against the feature
//! statistics of a clean corpus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Floor on the local variance in the MSCN denominator.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Stabilizer added to the local deviation (one 8-bit gray level).
const MSCN_C: f64 = 1.0 / 255.0;
pub const MIN_SIDE: usize = 16;
pub const FEATURE_COUNT: usize = 36;

/// Lanczos approximation (g = 7, n = 9) of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `Γ(2/α)² / (Γ(1/α) Γ(3/α))`, increasing in α.
fn gg_ratio(a: f64) -> f64 {
    (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp()
}

/// Shape α in [0.2, 10] with `gg_ratio(α) = r`, by bisection.
fn solve_shape(r: f64) -> f64 {
    let (mut lo, mut hi) = (0.2f64, 10.0f64);
    if !r.is_finite() || r <= gg_ratio(lo) {
        return lo;
    }
    if r >= gg_ratio(hi) {
        return hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if gg_ratio(mid) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Symmetric fit: (shape, variance).
fn ggd_fit(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| x * x).sum::<f64>() / n;
    let m1 = v.iter().map(|x| x.abs()).sum::<f64>() / n;
    if m2 <= 0.0 {
        return (10.0, 0.0);
    }
    (solve_shape(m1 * m1 / m2), m2)
}

/// Asymmetric fit: (shape, mean, left variance, right variance).
fn aggd_fit(v: &[f64]) -> [f64; 4] {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &x in v {
        if x < 0.0 {
            ls += x * x;
            ln += 1;
        } else if x > 0.0 {
            rs += x * x;
            rn += 1;
        }
    }
    let lvar = if ln > 0 { ls / ln as f64 } else { 0.0 };
    let rvar = if rn > 0 { rs / rn as f64 } else { 0.0 };
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| x * x).sum::<f64>() / n;
    let m1 = v.iter().map(|x| x.abs()).sum::<f64>() / n;
    if m2 <= 0.0 || lvar <= 0.0 || rvar <= 0.0 {
        return [10.0, 0.0, lvar, rvar];
    }
    let g = (lvar / rvar).sqrt();
    let r = m1 * m1 / m2;
    let big_r = r * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let a = solve_shape(big_r);
    let k = (ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp().sqrt();
    let mean = (rvar.sqrt() - lvar.sqrt()) * k * (ln_gamma(2.0 / a) - ln_gamma(1.0 / a)).exp();
    [a, mean, lvar, rvar]
}

fn gaussian_blur(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let sigma = 7.0 / 6.0;
    let k: Vec<f64> = (-3i32..=3).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let d = i as isize - 3;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    let yy = yy.clamp(0, h as isize - 1) as usize;
                    let xx = xx.clamp(0, w as isize - 1) as usize;
                    acc += kv * src[yy * w + xx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(p, true), false)
}

/// Mean-subtracted contrast-normalized coefficients of a gray plane.
pub fn mscn(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mu = gaussian_blur(p, h, w);
    let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
    let mu2 = gaussian_blur(&sq, h, w);
    (0..h * w).map(|i| (p[i] - mu[i]) / ((mu2[i] - mu[i] * mu[i]).max(VARIANCE_FLOOR).sqrt() + MSCN_C)).collect()
}

fn scale_features(p: &[f64], h: usize, w: usize, out: &mut Vec<f64>) {
    let m = mscn(p, h, w);
    let (a, var) = ggd_fit(&m);
    out.extend([a, var]);
    for (dy, dx) in [(0isize, 1isize), (1, 0), (1, 1), (1, -1)] {
        let mut prod = Vec::with_capacity(h * w);
        for y in 0..h as isize - dy {
            for x in 0.max(-dx)..(w as isize - dx.max(0)) {
                prod.push(m[y as usize * w + x as usize] * m[(y + dy) as usize * w + (x + dx) as usize]);
            }
        }
        out.extend(aggd_fit(&prod));
    }
}

/// 18 features at full and 18 at half resolution.
pub fn brisque_features(x: &Image) -> Result<Vec<f64>> {
    let (h, w) = (x.height(), x.width());
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(format!("quality scoring needs at least {MIN_SIDE}x{MIN_SIDE} pixels")));
    }
    let g: Vec<f64> = x.to_gray().data().iter().map(|&v| v as f64).collect();
    let mut f = Vec::with_capacity(FEATURE_COUNT);
    scale_features(&g, h, w, &mut f);
    let (h2, w2) = (h / 2, w / 2);
    let half: Vec<f64> = (0..h2 * w2)
        .map(|i| {
            let (y, x) = (2 * (i / w2), 2 * (i % w2));
            0.25 * (g[y * w + x] + g[y * w + x + 1] + g[(y + 1) * w + x] + g[(y + 1) * w + x + 1])
        })
        .collect();
    scale_features(&half, h2, w2, &mut f);
    Ok(f)
}

/// Feature means and deviations of a clean reference corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl QualityModel {
    pub fn fit(corpus: &[Image]) -> Result<Self> {
        if corpus.len() < 2 {
            return Err(Error::invalid("quality model needs at least two clean images"));
        }
        let feats = corpus.iter().map(brisque_features).collect::<Result<Vec<_>>>()?;
        let n = feats.len() as f64;
        let mean: Vec<f64> = (0..FEATURE_COUNT).map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / n).collect();
        let std = (0..FEATURE_COUNT)
            .map(|k| {
                let v = feats.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0);
                // Guards features that never vary on the corpus.
                v.sqrt().max(1e-3 * mean[k].abs()).max(1e-6)
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// RMS standardized distance of the image's features from the corpus
    /// mean; higher means less natural.
    pub fn score(&self, x: &Image) -> Result<f64> {
        let f = brisque_features(x)?;
        let s: f64 = f.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| ((v - m) / s).powi(2)).sum();
        Ok((s / FEATURE_COUNT as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-11);
        assert!((ln_gamma(0.1) - 2.252_712_651_734_206).abs() < 1e-10);
    }

    #[test]
    fn ggd_shape_recovers_gaussian_and_laplacian() {
        let mut r = rng::rng(1);
        let gauss: Vec<f64> = rng::gaussian_vec(200_000, &mut r).into_iter().map(|v| v as f64).collect();
        assert!((ggd_fit(&gauss).0 - 2.0).abs() < 0.05);
        let lap: Vec<f64> = (0..200_000).map(|_| {
            let u: f64 = r.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }).collect();
        assert!((ggd_fit(&lap).0 - 1.0).abs() < 0.05);
    }

    fn smooth(seed: u64) -> Image {
        let mut r = rng::rng(seed);
        let (a, b, c): (f32, f32, f32) = (r.random(), r.random(), r.random());
        Image::from_fn(Shape::new(32, 32, 1), |y, x, _| 0.5 + 0.3 * ((x as f32 * 0.3 * (1.0 + a)).sin() * (y as f32 * 0.2 * (1.0 + b) + c).cos()) + 0.01 * r.random::<f32>())
    }

    #[test]
    fn noise_raises_score_and_constants_are_finite() {
        let corpus: Vec<Image> = (0..20).map(smooth).collect();
        let q = QualityModel::fit(&corpus).unwrap();
        let x = smooth(100);
        let mut r = rng::rng(9);
        let noisy = x.map(|v| (v + 0.2 * (2.0 * r.random::<f32>() - 1.0)).clamp(0.0, 1.0));
        assert!(q.score(&noisy).unwrap() > q.score(&x).unwrap());
        assert!(q.score(&Image::filled(Shape::new(16, 16, 1), 0.4)).unwrap().is_finite());
        assert!(q.score(&Image::filled(Shape::new(8, 8, 1), 0.4)).is_err());
    }
}
