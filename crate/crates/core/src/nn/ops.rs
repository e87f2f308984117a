//! Differentiable primitives: convolution, pooling, resampling, activations
//! and dense layers. Each forward returns whatever its backward needs.

use crate::nn::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel, stride 1, "same" padding.
    pub const fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        Self { cin, cout, kernel, stride: 1, pad: kernel / 2 }
    }

    pub const fn strided(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self { cin, cout, kernel, stride, pad: kernel / 2 }
    }

    pub const fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub const fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// falls inside `0..w`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(k).div_ceil(s);
        // ox * s + k - pad < len  <=>  ox * s < len + pad - k
        let hi = if len + self.pad > k { (len + self.pad - k).div_ceil(s) } else { 0 };
        (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
    }

    /// Unfolds samples `n0..n1` of `x` into a `patch_len x ((n1 - n0) * ho * wo)` matrix.
    fn im2col<T: Real>(&self, x: &Tensor<T>, (n0, n1): (usize, usize), ho: usize, wo: usize, out: &mut Vec<T>) {
        let k = self.kernel;
        let cols = (n1 - n0) * ho * wo;
        out.clear();
        out.resize(self.patch_len() * cols, T::zero());
        for ci in 0..self.cin {
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, x.h, ho);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, x.w, wo);
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for n in n0..n1 {
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let src = x.at(ci, n, iy, 0);
                            let base = ((n - n0) * ho + oy) * wo;
                            if self.stride == 1 {
                                let ix0 = x0 + kx - self.pad;
                                dst[base + x0..base + x1].copy_from_slice(&x.data[src + ix0..src + ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    dst[base + ox] = x.data[src + ox * self.stride + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatters column gradients for samples `n0..n1` back into `dx`.
    fn col2im<T: Real>(&self, dcols: &[T], (n0, n1): (usize, usize), ho: usize, wo: usize, dx: &mut Tensor<T>) {
        let k = self.kernel;
        let cols = (n1 - n0) * ho * wo;
        for ci in 0..self.cin {
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, dx.h, ho);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, dx.w, wo);
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * cols..(row + 1) * cols];
                    for ni in n0..n1 {
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let dst = dx.at(ci, ni, iy, 0);
                            let base = ((ni - n0) * ho + oy) * wo;
                            if self.stride == 1 {
                                let ix0 = x0 + kx - self.pad;
                                for (d, &g) in dx.data[dst + ix0..dst + ix0 + (x1 - x0)].iter_mut().zip(&src[base + x0..base + x1]) {
                                    *d += g;
                                }
                            } else {
                                for ox in x0..x1 {
                                    dx.data[dst + ox * self.stride + kx - self.pad] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Sample ranges whose unfolded patches fit a modest scratch buffer, so
    /// the buffer stays on the heap instead of being mapped fresh each call.
    fn chunks(&self, n: usize, ho: usize, wo: usize) -> impl Iterator<Item = (usize, usize)> {
        const SCRATCH: usize = 1 << 20;
        let per = (self.patch_len() * ho * wo).max(1);
        let step = (SCRATCH / per).clamp(1, n.max(1));
        (0..n).step_by(step).map(move |a| (a, (a + step).min(n)))
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>, weight: &[T], bias: Option<&[T]>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut y = Tensor::zeros(self.cout, x.n, ho, wo);
        let l = y.row_len();
        let r = self.patch_len();
        let hw = ho * wo;
        let mut cols = Vec::new();
        for (n0, n1) in self.chunks(x.n, ho, wo) {
            self.im2col(x, (n0, n1), ho, wo, &mut cols);
            let m = (n1 - n0) * hw;
            T::gemm(self.cout, r, m, T::one(), weight, (r as isize, 1), &cols, (m as isize, 1), T::zero(), &mut y.data[n0 * hw..], (l as isize, 1));
        }
        if let Some(b) = bias {
            for (row, &bv) in y.data.chunks_exact_mut(l).zip(b) {
                for v in row {
                    *v += bv;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `dweight`/`dbias`; returns the input
    /// gradient when `want_dx` is set. `x` is the forward input.
    pub fn backward<T: Real>(&self, dy: &Tensor<T>, x: &Tensor<T>, weight: &[T], dweight: &mut [T], dbias: Option<&mut [T]>, want_dx: bool) -> Option<Tensor<T>> {
        let l = dy.row_len();
        let r = self.patch_len();
        let hw = dy.h * dy.w;
        if let Some(db) = dbias {
            for (d, row) in db.iter_mut().zip(dy.data.chunks_exact(l)) {
                *d += row.iter().copied().sum();
            }
        }
        let mut dx = want_dx.then(|| Tensor::zeros(self.cin, x.n, x.h, x.w));
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for (n0, n1) in self.chunks(x.n, dy.h, dy.w) {
            let m = (n1 - n0) * hw;
            let dy_chunk = &dy.data[n0 * hw..];
            self.im2col(x, (n0, n1), dy.h, dy.w, &mut cols);
            T::gemm(self.cout, m, r, T::one(), dy_chunk, (l as isize, 1), &cols, (1, m as isize), T::one(), dweight, (r as isize, 1));
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(r * m, T::zero());
                T::gemm(r, self.cout, m, T::one(), weight, (1, r as isize), dy_chunk, (l as isize, 1), T::zero(), &mut dcols, (m as isize, 1));
                self.col2im(&dcols, (n0, n1), dy.h, dy.w, dx);
            }
        }
        dx
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)`; backward needs the pre-activation.
pub fn silu<T: Real>(pre: &Tensor<T>) -> Tensor<T> {
    let mut out = pre.clone();
    for v in &mut out.data {
        *v = *v * sigmoid(*v);
    }
    out
}

pub fn silu_backward<T: Real>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &x) in dx.data.iter_mut().zip(&pre.data) {
        let s = sigmoid(x);
        *d *= s * (T::one() + x * (T::one() - s));
    }
    dx
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, x.n, h2, w2);
    let q = T::of(0.25);
    for c in 0..x.c {
        for n in 0..x.n {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let a = x.at(c, n, 2 * oy, 2 * ox);
                    let b = a + x.w;
                    let s = x.data[a] + x.data[a + 1] + x.data[b] + x.data[b + 1];
                    let i = y.at(c, n, oy, ox);
                    y.data[i] = s * q;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.c, dy.n, dy.h * 2, dy.w * 2);
    let q = T::of(0.25);
    for c in 0..dy.c {
        for n in 0..dy.n {
            for oy in 0..dy.h {
                for ox in 0..dy.w {
                    let g = dy.data[dy.at(c, n, oy, ox)] * q;
                    let a = dx.at(c, n, 2 * oy, 2 * ox);
                    let b = a + dx.w;
                    dx.data[a] = g;
                    dx.data[a + 1] = g;
                    dx.data[b] = g;
                    dx.data[b + 1] = g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.c, x.n, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for n in 0..x.n {
            for yy in 0..y.h {
                let src = x.at(c, n, yy / 2, 0);
                let dst = y.at(c, n, yy, 0);
                for xx in 0..y.w {
                    y.data[dst + xx] = x.data[src + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.c, dy.n, dy.h / 2, dy.w / 2);
    for c in 0..dy.c {
        for n in 0..dy.n {
            for yy in 0..dy.h {
                let src = dy.at(c, n, yy, 0);
                let dst = dx.at(c, n, yy / 2, 0);
                for xx in 0..dy.w {
                    dx.data[dst + xx / 2] += dy.data[src + xx];
                }
            }
        }
    }
    dx
}

/// Row-major `N x F` matrix of per-sample features.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `C x N x H x W` to `N x (C * H * W)`.
pub fn flatten<T: Real>(x: &Tensor<T>) -> Matrix<T> {
    let f = x.c * x.spatial();
    let mut m = Matrix::zeros(x.n, f);
    let sp = x.spatial();
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.at(c, n, 0, 0);
            m.data[n * f + c * sp..n * f + (c + 1) * sp].copy_from_slice(&x.data[src..src + sp]);
        }
    }
    m
}

pub fn unflatten<T: Real>(m: &Matrix<T>, c: usize, h: usize, w: usize) -> Tensor<T> {
    let mut x = Tensor::zeros(c, m.rows, h, w);
    let sp = h * w;
    for ci in 0..c {
        for n in 0..m.rows {
            let dst = x.at(ci, n, 0, 0);
            x.data[dst..dst + sp].copy_from_slice(&m.data[n * m.cols + ci * sp..n * m.cols + (ci + 1) * sp]);
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub const fn weight_len(&self) -> usize {
        self.fin * self.fout
    }

    pub fn forward<T: Real>(&self, x: &Matrix<T>, weight: &[T], bias: &[T]) -> Matrix<T> {
        let mut y = Matrix::zeros(x.rows, self.fout);
        for r in 0..x.rows {
            y.data[r * self.fout..(r + 1) * self.fout].copy_from_slice(bias);
        }
        T::gemm(x.rows, self.fin, self.fout, T::one(), &x.data, (self.fin as isize, 1), weight, (1, self.fin as isize), T::one(), &mut y.data, (self.fout as isize, 1));
        y
    }

    pub fn backward<T: Real>(&self, x: &Matrix<T>, dy: &Matrix<T>, weight: &[T], dweight: &mut [T], dbias: &mut [T], want_dx: bool) -> Option<Matrix<T>> {
        let n = x.rows;
        T::gemm(self.fout, n, self.fin, T::one(), &dy.data, (1, self.fout as isize), &x.data, (self.fin as isize, 1), T::one(), dweight, (self.fin as isize, 1));
        for r in 0..n {
            for (d, &g) in dbias.iter_mut().zip(dy.row(r)) {
                *d += g;
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = Matrix::zeros(n, self.fin);
        T::gemm(n, self.fout, self.fin, T::one(), &dy.data, (self.fout as isize, 1), weight, (self.fin as isize, 1), T::zero(), &mut dx.data, (self.fin as isize, 1));
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(spec: &Conv2d, x: &Tensor<f64>, w: &[f64], b: &[f64]) -> Tensor<f64> {
        let (ho, wo) = spec.out_dims(x.h, x.w);
        let mut y = Tensor::zeros(spec.cout, x.n, ho, wo);
        let k = spec.kernel;
        for co in 0..spec.cout {
            for n in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[co];
                        for ci in 0..spec.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        s += w[((co * spec.cin + ci) * k + ky) * k + kx] * x.data[x.at(ci, n, iy as usize, ix as usize)];
                                    }
                                }
                            }
                        }
                        let i = y.at(co, n, oy, ox);
                        y.data[i] = s;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for spec in [Conv2d::same(3, 4, 3), Conv2d::strided(2, 5, 3, 2), Conv2d::same(2, 2, 1)] {
            let x = Tensor { c: spec.cin, n: 2, h: 6, w: 5, data: pseudo(spec.cin * 60, 1) };
            let w = pseudo(spec.weight_len(), 2);
            let b = pseudo(spec.cout, 3);
            let y = spec.forward(&x, &w, Some(&b));
            let r = naive_conv(&spec, &x, &w, &b);
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunked_conv_matches_direct_sum() {
        // Large enough that the unfolded input is split across several chunks.
        let spec = Conv2d::same(16, 3, 3);
        let x = Tensor { c: 16, n: 9, h: 32, w: 32, data: pseudo(16 * 9 * 1024, 13) };
        let w = pseudo(spec.weight_len(), 14);
        let b = pseudo(3, 15);
        assert!(spec.chunks(9, 32, 32).count() > 1);
        let y = spec.forward(&x, &w, Some(&b));
        let r = naive_conv(&spec, &x, &w, &b);
        for (a, b) in y.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-10);
        }
        let g = Tensor { data: pseudo(y.data.len(), 16), ..y.clone() };
        let mut dw = vec![0.0; w.len()];
        let dx = spec.backward(&g, &x, &w, &mut dw, None, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>() - (0..3).map(|c| b[c] * g.data[c * 9216..(c + 1) * 9216].iter().sum::<f64>()).sum::<f64>();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-7 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-7 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and the weight gradient matches the same identity.
        let spec = Conv2d::strided(2, 3, 3, 2);
        let x = Tensor { c: 2, n: 2, h: 5, w: 6, data: pseudo(120, 4) };
        let w = pseudo(spec.weight_len(), 5);
        let y = spec.forward(&x, &w, None);
        let g = Tensor { c: y.c, n: y.n, h: y.h, w: y.w, data: pseudo(y.data.len(), 6) };
        let mut dw = vec![0.0; w.len()];
        let dx = spec.backward(&g, &x, &w, &mut dw, None, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = Tensor { c: 2, n: 1, h: 4, w: 4, data: pseudo(32, 7) };
        let g = Tensor { c: 2, n: 1, h: 2, w: 2, data: pseudo(8, 8) };
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&avg_pool2_backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample2(&g);
        let lhs: f64 = up.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.data.iter().zip(&upsample2_backward(&x).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn flatten_roundtrip() {
        let x = Tensor { c: 3, n: 2, h: 2, w: 2, data: pseudo(24, 9) };
        let m = flatten(&x);
        assert_eq!(m.row(1)[4], x.data[x.at(1, 1, 0, 0)]);
        assert_eq!(unflatten(&m, 3, 2, 2), x);
    }

    #[test]
    fn linear_backward_is_adjoint() {
        let lin = Linear { fin: 4, fout: 3 };
        let x = Matrix { rows: 2, cols: 4, data: pseudo(8, 10) };
        let w = pseudo(12, 11);
        let b = vec![0.0; 3];
        let y = lin.forward(&x, &w, &b);
        let g = Matrix { rows: 2, cols: 3, data: pseudo(6, 12) };
        let (mut dw, mut db) = (vec![0.0; 12], vec![0.0; 3]);
        let dx = lin.backward(&x, &g, &w, &mut dw, &mut db, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!((lhs - rhs_w).abs() < 1e-12);
    }
}
