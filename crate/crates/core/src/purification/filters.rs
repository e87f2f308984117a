//! Edge-preserving filters. Borders replicate the nearest pixel; images are
//! filtered channel by channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Bilateral filter over a `(2r+1)^2` window with `r = ceil(3 sigma_spatial)`.
pub fn bilateral_filter(x: &Image, sigma_spatial: f64, sigma_range: f64) -> Result<Image> {
    if !(sigma_spatial > 0.0 && sigma_range > 0.0) {
        return Err(Error::invalid("bilateral sigmas must be positive"));
    }
    let (h, w) = (x.height(), x.width());
    let r = (3.0 * sigma_spatial).ceil() as isize;
    let side = (2 * r + 1) as usize;
    let mut spatial = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            spatial.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma_spatial * sigma_spatial)).exp());
        }
    }
    let inv_range = -1.0 / (2.0 * sigma_range * sigma_range);
    let rows: Vec<Vec<usize>> = (0..h).map(|y| (-r..=r).map(|d| clamp_idx(y as isize + d, h)).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..w).map(|xx| (-r..=r).map(|d| clamp_idx(xx as isize + d, w)).collect()).collect();
    let mut out = x.clone();
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let centre = src[y * w + xx] as f64;
                let (mut num, mut den) = (0.0f64, 0.0f64);
                let mut k = 0;
                for &qy in &rows[y] {
                    let row = &src[qy * w..(qy + 1) * w];
                    for &qx in &cols[xx] {
                        let q = row[qx] as f64;
                        let d = q - centre;
                        let wgt = spatial[k] * (d * d * inv_range).exp();
                        num += wgt * q;
                        den += wgt;
                        k += 1;
                    }
                }
                dst[y * w + xx] = (num / den) as f32;
            }
        }
    }
    Ok(out)
}

/// Mean over the `(2r+1)^2` window, computed with separable running sums.
pub fn box_filter(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let n = (2 * r + 1) as f64;
    let ri = r as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let mut s: f64 = (-ri..=ri).map(|d| row[clamp_idx(d, w)]).sum();
        for x in 0..w {
            tmp[y * w + x] = s / n;
            s += row[clamp_idx(x as isize + ri + 1, w)] - row[clamp_idx(x as isize - ri, w)];
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        let mut s: f64 = (-ri..=ri).map(|d| tmp[clamp_idx(d, h) * w + x]).sum();
        for y in 0..h {
            out[y * w + x] = s / n;
            s += tmp[clamp_idx(y as isize + ri + 1, h) * w + x] - tmp[clamp_idx(y as isize - ri, h) * w + x];
        }
    }
    out
}

/// Guided filter: `q = mean(a) * I + mean(b)` with per-window
/// `a = cov(I, p) / (var(I) + eps)` and `b = mean(p) - a * mean(I)`.
pub fn guided_filter(guide: &Image, x: &Image, radius: usize, eps_reg: f64) -> Result<Image> {
    guide.ensure_same_shape(x)?;
    if radius == 0 {
        return Err(Error::invalid("guided filter radius must be at least 1"));
    }
    if !(eps_reg > 0.0) {
        return Err(Error::invalid("guided filter regularizer must be positive"));
    }
    let (h, w) = (x.height(), x.width());
    let mut out = x.clone();
    for c in 0..x.channels() {
        let i: Vec<f64> = guide.channel(c).iter().map(|&v| v as f64).collect();
        let p: Vec<f64> = x.channel(c).iter().map(|&v| v as f64).collect();
        let ip: Vec<f64> = i.iter().zip(&p).map(|(a, b)| a * b).collect();
        let ii: Vec<f64> = i.iter().map(|a| a * a).collect();
        let (mi, mp) = (box_filter(&i, h, w, radius), box_filter(&p, h, w, radius));
        let (mip, mii) = (box_filter(&ip, h, w, radius), box_filter(&ii, h, w, radius));
        let mut a = vec![0.0; h * w];
        let mut b = vec![0.0; h * w];
        for k in 0..h * w {
            let cov = mip[k] - mi[k] * mp[k];
            let var = (mii[k] - mi[k] * mi[k]).max(0.0);
            a[k] = cov / (var + eps_reg);
            b[k] = mp[k] - a[k] * mi[k];
        }
        let (ma, mb) = (box_filter(&a, h, w, radius), box_filter(&b, h, w, radius));
        for (k, o) in out.channel_mut(c).iter_mut().enumerate() {
            *o = (ma[k] * i[k] + mb[k]) as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeParams {
    pub bf_iters: usize,
    pub sigma_spatial: f64,
    pub sigma_range: f64,
    pub gf_radius: usize,
    pub gf_eps: f64,
    #[serde(default = "one")]
    pub gf_iters: usize,
}

fn one() -> usize {
    1
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self { bf_iters: 3, sigma_spatial: 2.0, sigma_range: 0.1, gf_radius: 4, gf_eps: 1e-3, gf_iters: 1 }
    }
}

impl CascadeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial > 0.0 && self.sigma_range > 0.0 && self.gf_eps > 0.0) {
            return Err(Error::invalid("cascade sigmas and eps must be positive"));
        }
        if self.gf_radius == 0 {
            return Err(Error::invalid("guided filter radius must be at least 1"));
        }
        Ok(())
    }
}

/// Repeated bilateral smoothing, then guided filtering of the smoothed image
/// with the original input as guide. Output is clamped to [0, 1].
pub fn cascade_purify(x: &Image, p: &CascadeParams) -> Result<Image> {
    p.validate()?;
    let mut y = x.clone();
    for _ in 0..p.bf_iters {
        y = bilateral_filter(&y, p.sigma_spatial, p.sigma_range)?;
    }
    for _ in 0..p.gf_iters {
        y = guided_filter(x, &y, p.gf_radius, p.gf_eps)?;
    }
    Ok(y.clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use proptest::prelude::*;

    fn at(img: &Image, y: isize, x: isize, c: usize) -> f64 {
        let yy = y.clamp(0, img.height() as isize - 1) as usize;
        let xx = x.clamp(0, img.width() as isize - 1) as usize;
        img.get(yy, xx, c) as f64
    }

    fn bilateral_oracle(x: &Image, ss: f64, sr: f64) -> Image {
        let r = (3.0 * ss).ceil() as isize;
        Image::from_fn(x.shape(), |y, xx, c| {
            let p = x.get(y, xx, c) as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let q = at(x, y as isize + dy, xx as isize + dx, c);
                    let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * ss * ss)).exp() * (-(p - q) * (p - q) / (2.0 * sr * sr)).exp();
                    num += wgt * q;
                    den += wgt;
                }
            }
            (num / den) as f32
        })
    }

    fn window_mean(f: &dyn Fn(isize, isize) -> f64, y: usize, x: usize, r: isize) -> f64 {
        let mut s = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                s += f(y as isize + dy, x as isize + dx);
            }
        }
        s / ((2 * r + 1) * (2 * r + 1)) as f64
    }

    fn guided_oracle(guide: &Image, x: &Image, r: usize, eps: f64) -> Image {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let r = r as isize;
        let cl = |y: isize, xx: isize| (y.clamp(0, h - 1), xx.clamp(0, w - 1));
        Image::from_fn(x.shape(), |y, xx, c| {
            let coef = |ky: isize, kx: isize| -> (f64, f64) {
                let (ky, kx) = cl(ky, kx);
                let (ky, kx) = (ky as usize, kx as usize);
                let mi = window_mean(&|a, b| at(guide, a, b, c), ky, kx, r);
                let mp = window_mean(&|a, b| at(x, a, b, c), ky, kx, r);
                let mip = window_mean(&|a, b| at(guide, a, b, c) * at(x, a, b, c), ky, kx, r);
                let mii = window_mean(&|a, b| at(guide, a, b, c).powi(2), ky, kx, r);
                let a = (mip - mi * mp) / ((mii - mi * mi).max(0.0) + eps);
                (a, mp - a * mi)
            };
            let ma = window_mean(&|a, b| coef(a, b).0, y, xx, r);
            let mb = window_mean(&|a, b| coef(a, b).1, y, xx, r);
            (ma * guide.get(y, xx, c) as f64 + mb) as f32
        })
    }

    fn random_image(seed: u64) -> Image {
        let mut r = crate::rng::rng(seed);
        use rand::Rng;
        Image::from_fn(Shape::new(8, 8, 1), |_, _, _| r.random::<f32>())
    }

    #[test]
    fn bilateral_matches_oracle() {
        for s in 0..20 {
            let x = random_image(s);
            let fast = bilateral_filter(&x, 2.0, 0.1).unwrap();
            assert!(fast.max_abs_diff(&bilateral_oracle(&x, 2.0, 0.1)).unwrap() < 1e-6);
        }
    }

    #[test]
    fn guided_matches_oracle() {
        for s in 0..20 {
            let (g, x) = (random_image(100 + s), random_image(200 + s));
            let fast = guided_filter(&g, &x, 2, 1e-3).unwrap();
            assert!(fast.max_abs_diff(&guided_oracle(&g, &x, 2, 1e-3)).unwrap() < 1e-5);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let c = Image::filled(Shape::new(9, 7, 3), 0.37);
        assert!(bilateral_filter(&c, 1.5, 0.05).unwrap().max_abs_diff(&c).unwrap() < 1e-6);
        assert!(guided_filter(&c, &c, 3, 1e-4).unwrap().max_abs_diff(&c).unwrap() < 1e-6);
        assert!(cascade_purify(&c, &CascadeParams::default()).unwrap().max_abs_diff(&c).unwrap() < 1e-6);
    }

    #[test]
    fn bilateral_preserves_step_edge() {
        let x = Image::from_fn(Shape::new(16, 16, 1), |_, xx, _| if xx < 8 { 0.0 } else { 1.0 });
        let y = bilateral_filter(&x, 2.0, 0.01).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 0.05);
    }

    #[test]
    fn heavy_regularization_gives_nested_box_mean() {
        let (g, x) = (random_image(1), random_image(2));
        let y = guided_filter(&g, &x, 1, 1e12).unwrap();
        let p: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let bb = box_filter(&box_filter(&p, 8, 8, 1), 8, 8, 1);
        for (a, b) in y.data().iter().zip(&bb) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_cascade_is_near_identity() {
        let x = random_image(3);
        let p = CascadeParams { bf_iters: 0, gf_eps: 1e-9, gf_radius: 1, ..CascadeParams::default() };
        assert!(cascade_purify(&x, &p).unwrap().max_abs_diff(&x).unwrap() < 1e-4);
    }

    #[test]
    fn rejects_bad_parameters() {
        let x = random_image(4);
        assert!(bilateral_filter(&x, 0.0, 0.1).is_err());
        assert!(guided_filter(&x, &x, 0, 1e-3).is_err());
        assert!(guided_filter(&x, &x, 1, 0.0).is_err());
        assert!(guided_filter(&x, &Image::zeros(Shape::new(4, 4, 1)), 1, 1e-3).is_err());
    }

    proptest! {
        #[test]
        fn cascade_stays_in_unit_range(seed in 0u64..1000, iters in 0usize..3) {
            let x = random_image(seed);
            let p = CascadeParams { bf_iters: iters, ..CascadeParams::default() };
            prop_assert!(cascade_purify(&x, &p).unwrap().in_unit_range());
        }
    }
}
