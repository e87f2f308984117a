use crate::image::{Image, Shape};
use crate::nn::Real;

/// Batched feature maps in channel-major `C x N x H x W` order.
///
/// Putting the channel axis outermost makes every convolution a single GEMM
/// over the whole batch and turns channel concatenation into a plain append.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * h * w] }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel (`N * H * W`).
    #[inline]
    pub fn row_len(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    /// Packs images (all the same shape) with the affine map `v -> scale * v + shift`.
    pub fn from_images(images: &[&Image], scale: f64, shift: f64) -> Self {
        let s = images[0].shape();
        let mut t = Self::zeros(s.channels, images.len(), s.height, s.width);
        let plane = s.plane();
        for (n, img) in images.iter().enumerate() {
            debug_assert_eq!(img.shape(), s);
            for c in 0..s.channels {
                let dst = (c * t.n + n) * plane;
                for (d, &v) in t.data[dst..dst + plane].iter_mut().zip(img.channel(c)) {
                    *d = T::of(scale * v as f64 + shift);
                }
            }
        }
        t
    }

    /// Unpacks sample `n` applying `v -> scale * v + shift`.
    pub fn to_image(&self, n: usize, scale: f64, shift: f64) -> Image {
        let shape = Shape::new(self.h, self.w, self.c);
        let plane = self.spatial();
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..self.c {
            let src = (c * self.n + n) * plane;
            data.extend(self.data[src..src + plane].iter().map(|v| (scale * v.f64() + shift) as f32));
        }
        Image::from_vec(shape, data).expect("tensor slice has image length")
    }

    pub fn to_images(&self, scale: f64, shift: f64) -> Vec<Image> {
        (0..self.n).map(|n| self.to_image(n, scale, shift)).collect()
    }

    pub fn concat_channels(mut self, other: &Self) -> Self {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w));
        self.data.extend_from_slice(&other.data);
        self.c += other.c;
        self
    }

    /// Splits off the trailing channels, returning `(first c_first, rest)`.
    pub fn split_channels(mut self, c_first: usize) -> (Self, Self) {
        let cut = c_first * self.row_len();
        let rest = self.data.split_off(cut);
        let tail = Self { c: self.c - c_first, n: self.n, h: self.h, w: self.w, data: rest };
        self.c = c_first;
        (self, tail)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_dims(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a per-(channel, sample) offset to every spatial position.
    pub fn add_channel_bias(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.c * self.n);
        let sp = self.spatial();
        for (chunk, &b) in self.data.chunks_exact_mut(sp).zip(bias) {
            for v in chunk {
                *v += b;
            }
        }
    }

    /// Gradient of [`Self::add_channel_bias`]: spatial sums per (channel, sample).
    pub fn channel_sums(&self) -> Vec<T> {
        self.data.chunks_exact(self.spatial()).map(|c| c.iter().copied().sum()).collect()
    }
}
