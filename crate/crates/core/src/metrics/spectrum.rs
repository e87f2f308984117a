use crate::error::{Error, Result};
use crate::fft::{fft2, shift};
use crate::image::{Image, Shape};

fn gray_plane(x: &Image) -> Vec<f64> {
    x.to_gray().data().iter().map(|&v| v as f64).collect()
}

/// Squared Fourier magnitudes of the grayscale image, DC at the center.
pub fn power_spectrum(x: &Image) -> Vec<f64> {
    let (h, w) = (x.height(), x.width());
    let f = fft2(&gray_plane(x), h, w);
    shift(&f.iter().map(|c| c.norm_sqr()).collect::<Vec<_>>(), h, w)
}

/// `log(1 + |F|)` of the grayscale image, DC-centered and scaled so the
/// largest bin is 1.
pub fn fourier_spectrum(x: &Image) -> Image {
    let (h, w) = (x.height(), x.width());
    let mag: Vec<f64> = power_spectrum(x).iter().map(|p| p.sqrt().ln_1p()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let k = if max > 0.0 { 1.0 / max } else { 0.0 };
    Image::from_vec(Shape::new(h, w, 1), mag.iter().map(|&v| (v * k) as f32).collect()).expect("plane")
}

/// Fraction of spectral power outside the centered square of side
/// `cutoff_frac * min(H, W)`. Zero for an all-zero image.
pub fn hf_energy(x: &Image, cutoff_frac: f64) -> Result<f64> {
    if !(cutoff_frac > 0.0 && cutoff_frac < 1.0) {
        return Err(Error::invalid("cutoff_frac must lie in (0, 1)"));
    }
    let (h, w) = (x.height(), x.width());
    let p = power_spectrum(x);
    let side = ((cutoff_frac * h.min(w) as f64) as usize).max(1);
    let (oy, ox) = ((h - side.min(h)) / 2, (w - side.min(w)) / 2);
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let mut low = 0.0;
    for y in oy..oy + side {
        low += p[y * w + ox..y * w + ox + side].iter().sum::<f64>();
    }
    Ok((1.0 - low / total).clamp(0.0, 1.0))
}

/// Per-pixel channel-mean of `|x_mod - x|`, divided by `scale` (the budget
/// for protected pairs) or by the map's own maximum when `scale` is `None`.
/// Values are clipped to [0, 1].
pub fn perturbation_map(x: &Image, x_mod: &Image, scale: Option<f64>) -> Result<Image> {
    x.ensure_same_shape(x_mod)?;
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let mut m = Image::from_fn(Shape::new(h, w, 1), |y, xx, _| (0..c).map(|ch| (x_mod.get(y, xx, ch) - x.get(y, xx, ch)).abs()).sum::<f32>() / c as f32);
    let div = match scale {
        Some(s) if s > 0.0 => s as f32,
        Some(_) => return Err(Error::invalid("heatmap scale must be positive")),
        None => m.min_max().1,
    };
    if div > 0.0 {
        m = m.map(|v| (v / div).min(1.0));
    }
    Ok(m)
}

/// Black, purple, orange, pale yellow.
const RAMP: [[f32; 3]; 5] = [[0.0, 0.0, 0.02], [0.34, 0.06, 0.43], [0.73, 0.21, 0.33], [0.98, 0.55, 0.04], [0.99, 1.0, 0.64]];

pub fn colorize(v: f32) -> [f32; 3] {
    let t = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f32;
    let i = (t as usize).min(RAMP.len() - 2);
    let f = t - i as f32;
    std::array::from_fn(|k| RAMP[i][k] * (1.0 - f) + RAMP[i + 1][k] * f)
}

/// Color-mapped [`perturbation_map`].
pub fn perturbation_heatmap(x: &Image, x_mod: &Image, scale: Option<f64>) -> Result<Image> {
    let m = perturbation_map(x, x_mod, scale)?;
    Ok(Image::from_fn(Shape::new(m.height(), m.width(), 3), |y, xx, c| colorize(m.get(y, xx, 0))[c]))
}
