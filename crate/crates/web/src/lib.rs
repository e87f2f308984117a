//! Browser bindings. Images cross the boundary as row-major grayscale
//! `Float32Array`s in [0, 1]; every export has a plain-Rust twin that the
//! native tests call.

use purify_core::defense::make_hf_mask;
use purify_core::harness::{generate_toy_dataset, ToyDatasetSpec};
use purify_core::metrics::{fourier_spectrum, hf_energy, perturbation_map, HF_CUTOFF};
use purify_core::purification::{blend, cascade_purify, grid_origins, CascadeParams};
use purify_core::rng;
use purify_core::{Image, Shape};
use wasm_bindgen::prelude::*;

fn image(pixels: &[f32], side: usize) -> Result<Image, String> {
    Image::from_vec(Shape::new(side, side, 1), pixels.to_vec()).map_err(|e| e.to_string())
}

/// A toy face: identity `identity` of a fixed 4-identity set.
pub fn face(identity: usize, seed: u64, side: usize) -> Result<Vec<f32>, String> {
    let d = generate_toy_dataset(&ToyDatasetSpec { size: side, ..ToyDatasetSpec::new(4, 1, seed) }).map_err(|e| e.to_string())?;
    Ok(d.images[identity % 4][0].data().to_vec())
}

/// A stand-in protective perturbation: random ±eta signs, optionally
/// concentrated on edges by the high-frequency mask.
pub fn perturb(pixels: &[f32], side: usize, eta: f32, hf_only: bool, seed: u64) -> Result<Vec<f32>, String> {
    let x = image(pixels, side)?;
    let mask = if hf_only { Some(make_hf_mask(&x, 0.25, 0.2).map_err(|e| e.to_string())?) } else { None };
    let mut r = rng::rng(seed);
    let noise = rng::gaussian_vec(x.data().len(), &mut r);
    Ok(x.data()
        .iter()
        .zip(noise)
        .enumerate()
        .map(|(i, (&v, n))| {
            let m = mask.as_ref().map_or(1.0, |m| m.data()[i]);
            (v + eta * m * n.signum()).clamp(0.0, 1.0)
        })
        .collect())
}

pub fn purify_cascade(pixels: &[f32], side: usize, sigma_s: f64, sigma_r: f64, gf_radius: usize, gf_eps: f64) -> Result<Vec<f32>, String> {
    let p = CascadeParams { sigma_spatial: sigma_s, sigma_range: sigma_r, gf_radius, gf_eps, ..CascadeParams::default() };
    cascade_purify(&image(pixels, side)?, &p).map(Image::into_vec).map_err(|e| e.to_string())
}

/// Normalized log-magnitude spectrum, DC centered.
pub fn spectrum(pixels: &[f32], side: usize) -> Result<Vec<f32>, String> {
    Ok(fourier_spectrum(&image(pixels, side)?).into_vec())
}

pub fn high_frequency_energy(pixels: &[f32], side: usize) -> Result<f64, String> {
    hf_energy(&image(pixels, side)?, HF_CUTOFF).map_err(|e| e.to_string())
}

/// |b − a| scaled by its own maximum.
pub fn difference_map(a: &[f32], b: &[f32], side: usize) -> Result<Vec<f32>, String> {
    perturbation_map(&image(a, side)?, &image(b, side)?, None).map(Image::into_vec).map_err(|e| e.to_string())
}

/// `(1 − gamma) * purified + gamma * previous`.
pub fn grid_blend(purified: &[f32], previous: &[f32], side: usize, gamma: f64) -> Result<Vec<f32>, String> {
    blend(&image(purified, side)?, &image(previous, side)?, gamma).map(Image::into_vec).map_err(|e| e.to_string())
}

/// How many patches cover each pixel for a `patch`/`stride` tiling.
pub fn grid_coverage(side: usize, patch: usize, stride: usize) -> Result<Vec<f32>, String> {
    if patch == 0 || stride == 0 || stride > patch || patch > side {
        return Err(format!("need 0 < stride <= patch <= {side}"));
    }
    let origins = grid_origins(side, patch, stride);
    let mut cover = vec![0.0f32; side * side];
    for &oy in &origins {
        for &ox in &origins {
            for y in oy..oy + patch {
                for x in ox..ox + patch {
                    cover[y * side + x] += 1.0;
                }
            }
        }
    }
    Ok(cover)
}

fn js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = face)]
pub fn face_js(identity: usize, seed: u32, side: usize) -> Result<Vec<f32>, JsValue> {
    js(face(identity, seed as u64, side))
}

#[wasm_bindgen(js_name = perturb)]
pub fn perturb_js(pixels: &[f32], side: usize, eta: f32, hf_only: bool, seed: u32) -> Result<Vec<f32>, JsValue> {
    js(perturb(pixels, side, eta, hf_only, seed as u64))
}

#[wasm_bindgen(js_name = purifyCascade)]
pub fn purify_cascade_js(pixels: &[f32], side: usize, sigma_s: f64, sigma_r: f64, gf_radius: usize, gf_eps: f64) -> Result<Vec<f32>, JsValue> {
    js(purify_cascade(pixels, side, sigma_s, sigma_r, gf_radius, gf_eps))
}

#[wasm_bindgen(js_name = spectrum)]
pub fn spectrum_js(pixels: &[f32], side: usize) -> Result<Vec<f32>, JsValue> {
    js(spectrum(pixels, side))
}

#[wasm_bindgen(js_name = highFrequencyEnergy)]
pub fn high_frequency_energy_js(pixels: &[f32], side: usize) -> Result<f64, JsValue> {
    js(high_frequency_energy(pixels, side))
}

#[wasm_bindgen(js_name = differenceMap)]
pub fn difference_map_js(a: &[f32], b: &[f32], side: usize) -> Result<Vec<f32>, JsValue> {
    js(difference_map(a, b, side))
}

#[wasm_bindgen(js_name = gridBlend)]
pub fn grid_blend_js(purified: &[f32], previous: &[f32], side: usize, gamma: f64) -> Result<Vec<f32>, JsValue> {
    js(grid_blend(purified, previous, side, gamma))
}

#[wasm_bindgen(js_name = gridCoverage)]
pub fn grid_coverage_js(side: usize, patch: usize, stride: usize) -> Result<Vec<f32>, JsValue> {
    js(grid_coverage(side, patch, stride))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturb_then_purify_lowers_high_frequency_energy() {
        let x = face(1, 3, 32).unwrap();
        let p = perturb(&x, 32, 0.05, false, 9).unwrap();
        assert!(p.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 0.05 + 1e-6));
        let q = purify_cascade(&p, 32, 2.0, 0.1, 4, 1e-3).unwrap();
        let (hx, hp, hq) = (high_frequency_energy(&x, 32).unwrap(), high_frequency_energy(&p, 32).unwrap(), high_frequency_energy(&q, 32).unwrap());
        assert!(hp > hx && hq < hp, "{hx} {hp} {hq}");
        assert_eq!(spectrum(&x, 32).unwrap().len(), 1024);
        assert!(difference_map(&x, &p, 32).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blend_and_coverage() {
        let a = vec![1.0; 16];
        let b = vec![0.0; 16];
        assert!(grid_blend(&a, &b, 4, 0.25).unwrap().iter().all(|&v| v == 0.75));
        let c = grid_coverage(32, 16, 8).unwrap();
        assert_eq!(c[0], 1.0);
        assert_eq!(c[16 * 32 + 16], 4.0);
        assert!(grid_coverage(32, 16, 20).is_err());
        assert!(image(&[0.0; 3], 2).is_err());
    }
}
