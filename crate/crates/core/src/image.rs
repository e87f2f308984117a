//! Planar floating-point images.
//!
//! An [`Image`] is an `H x W x C` array of `f32` values, nominally in `[0, 1]`,
//! stored channel-major (`data[(c * H + y) * W + x]`). Every stage of the
//! pipeline exchanges images in this form; the diffusion model rescales to
//! `[-1, 1]` internally.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Image {
        Image { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Image { shape: self.shape, data })
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f32> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(s / self.data.len().max(1) as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Luma for RGB (Rec. 601 weights), the mean of channels otherwise.
    pub fn to_gray(&self) -> Image {
        let s = Shape::new(self.shape.height, self.shape.width, 1);
        match self.shape.channels {
            1 => Image { shape: s, data: self.data.clone() },
            3 => {
                let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
                let data = (0..s.plane()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
                Image { shape: s, data }
            }
            c => {
                let p = s.plane();
                let data = (0..p)
                    .map(|i| (0..c).map(|k| self.data[k * p + i]).sum::<f32>() / c as f32)
                    .collect();
                Image { shape: s, data }
            }
        }
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.shape.height || x0 + w > self.shape.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.shape.height, self.shape.width
            )));
        }
        let shape = Shape::new(h, w, self.shape.channels);
        Ok(Image::from_fn(shape, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }

    /// Nearest-neighbour resize, used by real-image ingestion and the demo.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Image {
        let shape = Shape::new(h, w, self.shape.channels);
        Image::from_fn(shape, |y, x, c| {
            let sy = (y * self.shape.height) / h;
            let sx = (x * self.shape.width) / w;
            self.get(sy, sx, c)
        })
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        let shape = Shape::new(h, w, self.shape.channels);
        let (sh, sw) = (self.shape.height as f32, self.shape.width as f32);
        Image::from_fn(shape, |y, x, c| {
            let fy = ((y as f32 + 0.5) * sh / h as f32 - 0.5).clamp(0.0, sh - 1.0);
            let fx = ((x as f32 + 0.5) * sw / w as f32 - 0.5).clamp(0.0, sw - 1.0);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.shape.height - 1), (x0 + 1).min(self.shape.width - 1));
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let top = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
            let bot = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    /// Center-crop to a square, then resize to `size x size`.
    pub fn center_crop_resize(&self, size: usize) -> Image {
        let side = self.shape.height.min(self.shape.width);
        let y0 = (self.shape.height - side) / 2;
        let x0 = (self.shape.width - side) / 2;
        self.crop(y0, x0, side, side)
            .expect("square crop fits inside the image")
            .resize_bilinear(size, size)
    }

    /// Writes an 8-bit PNG (gray for one channel, RGB for three).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.shape.height as u32, self.shape.width as u32);
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.shape.channels {
            1 => {
                let buf = image::GrayImage::from_fn(w, h, |x, y| image::Luma([q(self.get(y as usize, x as usize, 0))]));
                buf.save(path)?;
            }
            3 => {
                let buf = image::RgbImage::from_fn(w, h, |x, y| {
                    let (y, x) = (y as usize, x as usize);
                    image::Rgb([q(self.get(y, x, 0)), q(self.get(y, x, 1)), q(self.get(y, x, 2))])
                });
                buf.save(path)?;
            }
            c => return Err(Error::invalid(format!("cannot encode {c}-channel image as PNG"))),
        }
        Ok(())
    }

    /// Reads a PNG as gray (`channels == 1`) or RGB (`channels == 3`).
    pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
        let img = image::open(path)?;
        match channels {
            1 => {
                let g = img.to_luma32f();
                let shape = Shape::new(g.height() as usize, g.width() as usize, 1);
                Ok(Image::from_fn(shape, |y, x, _| g.get_pixel(x as u32, y as u32)[0]))
            }
            3 => {
                let g = img.to_rgb32f();
                let shape = Shape::new(g.height() as usize, g.width() as usize, 3);
                Ok(Image::from_fn(shape, |y, x, c| g.get_pixel(x as u32, y as u32)[c]))
            }
            c => Err(Error::invalid(format!("unsupported channel count {c}"))),
        }
    }
}

const SET_MAGIC: &[u8; 8] = b"PIMGSET1";

/// Lossless binary container for a list of equally shaped images.
///
/// Layout (little endian): magic `PIMGSET1`, `u32` count, `u32` height,
/// `u32` width, `u32` channels, then `count * H * W * C` `f32` values.
pub fn write_image_set(path: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    let shape = images.first().map(|i| i.shape()).unwrap_or(Shape::new(0, 0, 0));
    let mut buf = Vec::with_capacity(24 + images.len() * shape.len() * 4);
    buf.extend_from_slice(SET_MAGIC);
    for v in [images.len(), shape.height, shape.width, shape.channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(shape, img.shape()));
        }
        for v in img.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Writes `images.pimg` plus `000.png`, `001.png`, ... into `dir`, creating
/// it if needed. The container is the lossless copy; PNGs are for viewing.
pub fn export_set_dir(dir: &Path, images: &[Image]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_image_set(dir.join("images.pimg"), images)?;
    for (i, img) in images.iter().enumerate() {
        img.save_png(dir.join(format!("{i:03}.png")))?;
    }
    Ok(())
}

pub fn read_image_set(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 24 || &buf[..8] != SET_MAGIC {
        return Err(Error::Format("missing image-set magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (count, shape) = (word(0), Shape::new(word(1), word(2), word(3)));
    let need = 24 + count * shape.len() * 4;
    if buf.len() != need {
        return Err(Error::Format(format!("image set truncated: {} of {need} bytes", buf.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut values = buf[24..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for _ in 0..count {
        let data: Vec<f32> = values.by_ref().take(shape.len()).collect();
        out.push(Image::from_vec(shape, data)?);
    }
    Ok(out)
}
