use crate::error::{Error, Result};
use crate::fft::{fft2, freq, ifft2};
use crate::image::{Image, Shape};

/// Per-pixel budget multipliers that favor high-frequency regions.
///
/// The grayscale image is high-passed in the Fourier domain (bins with radial
/// frequency below `cutoff` times Nyquist are zeroed) and the response
/// magnitude is normalized by its maximum. Pixels whose normalized response
/// reaches `cutoff` get 1, the rest `low_mult`; the map is then softened with
/// a 3×3 max-of-box pass so it never has hard steps on the low side. Images
/// with no high-frequency content give `low_mult` everywhere.
pub fn make_hf_mask(x: &Image, cutoff: f64, low_mult: f64) -> Result<Image> {
    if !(cutoff > 0.0 && cutoff <= 0.5) {
        return Err(Error::invalid("cutoff must lie in (0, 0.5]"));
    }
    if !(0.0..=1.0).contains(&low_mult) {
        return Err(Error::invalid("low_mult must lie in [0, 1]"));
    }
    let (h, w) = (x.height(), x.width());
    let shape = Shape::new(h, w, 1);
    let gray: Vec<f64> = x.to_gray().data().iter().map(|&v| v as f64).collect();
    let mut spec = fft2(&gray, h, w);
    for u in 0..h {
        for v in 0..w {
            let r = (freq(u, h).powi(2) + freq(v, w).powi(2)).sqrt() / 0.5;
            if r < cutoff {
                spec[u * w + v] = 0.0.into();
            }
        }
    }
    let resp: Vec<f64> = ifft2(&spec, h, w).iter().map(|c| c.re.abs()).collect();
    let max = resp.iter().cloned().fold(0.0, f64::max);
    let lo = low_mult as f32;
    // Relative to the pixel range; anything below is float noise.
    if max < 1e-9 {
        return Ok(Image::filled(shape, lo));
    }
    let binary: Vec<f32> = resp.iter().map(|&r| if r / max >= cutoff { 1.0 } else { lo }).collect();
    Ok(Image::from_fn(shape, |y, xx, _| {
        let mut s = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xc = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                s += binary[yy * w + xc];
            }
        }
        binary[y * w + xx].max(s / 9.0)
    }))
}
