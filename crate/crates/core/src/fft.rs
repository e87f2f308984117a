//! 2-D FFT over row-major real planes.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub type C64 = Complex<f64>;

fn transform(data: &mut [C64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse { (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)) } else { (planner.plan_fft_forward(w), planner.plan_fft_forward(h)) };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut buf = vec![C64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
    if inverse {
        let k = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= k);
    }
}

/// Unnormalized forward transform.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Vec<C64> {
    assert_eq!(plane.len(), h * w);
    let mut d: Vec<C64> = plane.iter().map(|&v| C64::new(v, 0.0)).collect();
    transform(&mut d, h, w, false);
    d
}

/// Inverse of [`fft2`], including the `1 / (h w)` factor.
pub fn ifft2(spec: &[C64], h: usize, w: usize) -> Vec<C64> {
    let mut d = spec.to_vec();
    transform(&mut d, h, w, true);
    d
}

/// Signed frequency of bin `k` out of `n`, in cycles per sample.
pub fn freq(k: usize, n: usize) -> f64 {
    let k = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
    k / n as f64
}

/// Moves the zero-frequency bin to `(h / 2, w / 2)`.
pub fn shift<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = data[y * w + x];
        }
    }
    out
}
