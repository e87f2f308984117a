//! Procedural face-like identities. An identity is a fixed parameter vector
//! (head shape, hair, eyes, brows, nose, mouth, tones); an instance is a
//! render of it with pose, lighting, expression and exposure jitter.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_image_set, write_image_set, Image, Shape};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub size: usize,
    /// 1 for grayscale, 3 for tinted color renders.
    pub channels: usize,
    pub seed: u64,
}

impl ToyDatasetSpec {
    pub fn new(identities: usize, images_per_identity: usize, seed: u64) -> Self {
        Self { identities, images_per_identity, size: 32, channels: 1, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Identity {
    bg: f32,
    face_w: f32,
    face_h: f32,
    hair: f32,
    hair_tone: f32,
    skin: f32,
    eye_y: f32,
    eye_sep: f32,
    eye_r: f32,
    eye_aspect: f32,
    brow_tilt: f32,
    nose: f32,
    nose_w: f32,
    mouth_y: f32,
    mouth_w: f32,
    tint: [f32; 3],
}

struct Jitter {
    dx: f32,
    dy: f32,
    light: f32,
    smile: f32,
    gain: f32,
    offset: f32,
}

fn u(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    rng.random_range(lo..hi)
}

impl Identity {
    fn draw(rng: &mut Rng) -> Self {
        Self {
            bg: u(rng, 0.3, 0.9),
            face_w: u(rng, 8.0, 12.0),
            face_h: u(rng, 10.0, 13.0),
            hair: u(rng, 1.0, 4.0),
            hair_tone: u(rng, 0.05, 0.45),
            skin: u(rng, 0.6, 0.8),
            eye_y: u(rng, 2.0, 5.0),
            eye_sep: u(rng, 3.0, 5.5),
            eye_r: u(rng, 1.2, 2.5),
            eye_aspect: u(rng, 0.5, 1.0),
            brow_tilt: u(rng, -1.0, 1.0),
            nose: u(rng, 2.0, 5.0),
            nose_w: u(rng, 0.5, 1.5),
            mouth_y: u(rng, 4.0, 7.5),
            mouth_w: u(rng, 2.5, 5.5),
            tint: [u(rng, 0.85, 1.15), u(rng, 0.85, 1.15), u(rng, 0.85, 1.15)],
        }
    }
}

/// Renders on a 32-unit canvas scaled to `size` pixels.
fn render(p: &Identity, j: &Jitter, size: usize, channels: usize, rng: &mut Rng) -> Image {
    let k = 32.0 / size as f32;
    let cx = 16.0 + j.dx;
    let cy = 17.0 + j.dy;
    let ey = cy - p.eye_y;
    let noise = Normal::new(0.0f32, 0.01).expect("finite");
    let mut img = Image::zeros(Shape::new(size, size, channels));
    for py in 0..size {
        for px in 0..size {
            let (y, x) = ((py as f32 + 0.5) * k, (px as f32 + 0.5) * k);
            // (value, whether it is skin or hair and takes the tint)
            let mut v = (p.bg, false);
            let hr = ((x - cx) / (p.face_w + 1.5)).powi(2) + ((y - cy + p.hair) / (p.face_h + 1.0)).powi(2);
            if hr < 1.0 {
                v = (p.hair_tone, true);
            }
            if ((x - cx) / p.face_w).powi(2) + ((y - cy) / p.face_h).powi(2) < 1.0 {
                v = (p.skin + j.light * (x - cx) / 32.0, true);
            }
            for s in [-1.0f32, 1.0] {
                let ex = cx + s * p.eye_sep;
                if ((x - ex) / p.eye_r).powi(2) + ((y - ey) / (p.eye_r * p.eye_aspect)).powi(2) < 1.0 {
                    v = (0.1, false);
                }
                let brow_y = ey - p.eye_r - 1.2 - p.brow_tilt * s * (x - ex) / 3.0;
                if (x - ex).abs() < p.eye_r + 0.5 && (y - brow_y).abs() < 0.6 {
                    v = (p.hair_tone * 0.5, true);
                }
            }
            if (x - cx).abs() < p.nose_w && y > ey + 1.0 && y < ey + 1.0 + p.nose {
                v = (p.skin - 0.15, true);
            }
            let curve = cy + p.mouth_y + j.smile * ((x - cx) / p.mouth_w).powi(2);
            if (x - cx).abs() < p.mouth_w && (y - curve).abs() < 0.9 {
                v = (0.2, false);
            }
            for c in 0..channels {
                let tinted = if channels == 3 && v.1 { v.0 * p.tint[c] } else { v.0 };
                let out = 0.5 + (tinted - 0.5) * j.gain + j.offset + noise.sample(rng);
                img.set(py, px, c, out.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Images grouped by identity: `images[i][k]` is instance `k` of identity `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub spec: ToyDatasetSpec,
    pub images: Vec<Vec<Image>>,
}

pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<ToyDataset> {
    if spec.identities < 4 {
        return Err(Error::invalid("need at least 4 identities"));
    }
    if spec.images_per_identity == 0 || spec.size < 8 || !matches!(spec.channels, 1 | 3) {
        return Err(Error::invalid("need images, size >= 8 and 1 or 3 channels"));
    }
    let mut rng = rng::rng(spec.seed);
    let ids: Vec<Identity> = (0..spec.identities).map(|_| Identity::draw(&mut rng)).collect();
    let images = ids
        .iter()
        .map(|p| {
            (0..spec.images_per_identity)
                .map(|_| {
                    let j = Jitter {
                        dx: u(&mut rng, -1.0, 1.0),
                        dy: u(&mut rng, -1.0, 1.0),
                        light: u(&mut rng, -0.3, 0.3),
                        smile: u(&mut rng, -1.5, 1.5),
                        gain: u(&mut rng, 0.8, 1.2),
                        offset: u(&mut rng, -0.08, 0.08),
                    };
                    render(p, &j, spec.size, spec.channels, &mut rng)
                })
                .collect()
        })
        .collect();
    Ok(ToyDataset { spec: spec.clone(), images })
}

impl ToyDataset {
    pub fn shape(&self) -> Shape {
        Shape::new(self.spec.size, self.spec.size, self.spec.channels)
    }

    /// Instances `range` of identity `id`.
    pub fn slice(&self, id: usize, range: [usize; 2]) -> Result<Vec<Image>> {
        let imgs = self.images.get(id).ok_or_else(|| Error::invalid(format!("no identity {id}")))?;
        imgs.get(range[0]..range[1]).map(<[Image]>::to_vec).ok_or_else(|| Error::invalid(format!("identity {id} has no instances {}..{}", range[0], range[1])))
    }

    /// `(image, identity)` pairs for instances `range` of every identity.
    pub fn labeled(&self, range: [usize; 2]) -> Result<Vec<(Image, usize)>> {
        let mut out = Vec::new();
        for id in 0..self.images.len() {
            out.extend(self.slice(id, range)?.into_iter().map(|x| (x, id)));
        }
        Ok(out)
    }

    /// `spec.json`, `identity-NNN.pimg`, and a contact sheet of the first
    /// instance of each identity.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&self.spec)?)?;
        for (i, imgs) in self.images.iter().enumerate() {
            write_image_set(dir.join(format!("identity-{i:03}.pimg")), imgs)?;
        }
        let firsts: Vec<Image> = self.images.iter().filter_map(|v| v.first().cloned()).collect();
        contact_sheet(&firsts, 8)?.save_png(dir.join("identities.png"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: ToyDatasetSpec = serde_json::from_slice(&std::fs::read(dir.join("spec.json"))?)?;
        let images = (0..spec.identities).map(|i| read_image_set(dir.join(format!("identity-{i:03}.pimg")))).collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, images })
    }
}

/// Tiles equally shaped images into rows of `per_row`, with a 1-pixel gap.
pub fn contact_sheet(images: &[Image], per_row: usize) -> Result<Image> {
    let first = images.first().ok_or(Error::Empty("contact sheet"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let cols = per_row.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut sheet = Image::filled(Shape::new(rows * (h + 1) - 1, cols * (w + 1) - 1, c), 1.0);
    for (i, img) in images.iter().enumerate() {
        first.ensure_same_shape(img)?;
        let (oy, ox) = (i / cols * (h + 1), i % cols * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    sheet.set(oy + y, ox + x, ch, img.get(y, x, ch));
                }
            }
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_identity_structured() {
        let spec = ToyDatasetSpec::new(6, 6, 3);
        let a = generate_toy_dataset(&spec).unwrap();
        assert_eq!(a, generate_toy_dataset(&spec).unwrap());
        assert!(a.images.iter().flatten().all(|x| x.in_unit_range() && x.shape() == Shape::new(32, 32, 1)));
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..3 {
                    let m = a.images[i][k].mse(&a.images[j][k + 3]).unwrap();
                    if i == j {
                        within += m;
                        nw += 1;
                    } else {
                        cross += m;
                        nc += 1;
                    }
                }
            }
        }
        assert!(within / (nw as f64) < cross / (nc as f64));
        assert!(generate_toy_dataset(&ToyDatasetSpec::new(3, 6, 3)).is_err());
        let rgb = generate_toy_dataset(&ToyDatasetSpec { channels: 3, size: 16, ..spec }).unwrap();
        assert_eq!(rgb.images[0][0].shape(), Shape::new(16, 16, 3));
    }

    #[test]
    fn save_load_and_slices() {
        let d = generate_toy_dataset(&ToyDatasetSpec::new(4, 5, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(ToyDataset::load(dir.path()).unwrap(), d);
        assert_eq!(d.slice(1, [1, 3]).unwrap(), d.images[1][1..3].to_vec());
        assert_eq!(d.labeled([0, 2]).unwrap().len(), 8);
        assert!(d.slice(1, [3, 9]).is_err());
        assert_eq!(contact_sheet(&d.images[0], 3).unwrap().shape(), Shape::new(65, 98, 1));
    }
}
