//! Small trainable stand-ins for a face-recognition embedder and a face
//! detector.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::nn::{first_non_finite, Adam, ConvNet, ConvNetSpec, Matrix, Tensor};
use crate::rng::{self, Rng};

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub embed_dim: usize,
    pub embed_steps: usize,
    pub detector_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of each identity's images held back to calibrate the detector.
    pub calibration_fraction: f64,
    /// Target rate of clean images scored below the threshold.
    pub false_failure_rate: f64,
    pub seed: u64,
}

impl SurrogateConfig {
    pub fn new(seed: u64) -> Self {
        Self { embed_dim: 32, embed_steps: 600, detector_steps: 600, learning_rate: 2e-3, batch_size: 32, calibration_fraction: 0.25, false_failure_rate: 0.01, seed }
    }
}

/// Network weights plus architecture, rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Weights {
    spec: ConvNetSpec,
    params: Vec<f32>,
}

impl Weights {
    fn run(&self, images: &[Image]) -> Vec<Vec<f32>> {
        let net = ConvNet::new(self.spec.clone());
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let t = net.forward(&self.params, &Tensor::from_images(&refs, 1.0, 0.0));
            let m = t.outputs.first().expect("at least one dense layer");
            out.extend((0..m.rows).map(|r| m.row(r).to_vec()));
        }
        out
    }
}

/// Maps an image to a unit vector; same identity ⇒ high cosine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedder {
    weights: Weights,
    /// Mean training feature, removed before normalizing.
    center: Vec<f32>,
    pub identities: usize,
}

impl IdentityEmbedder {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn embed(&self, images: &[Image]) -> Vec<Vec<f64>> {
        self.weights
            .run(images)
            .into_iter()
            .map(|f| {
                let v: Vec<f64> = f.iter().zip(&self.center).map(|(a, c)| (a - c) as f64).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    v.iter().map(|x| x / n).collect()
                } else {
                    let mut e = vec![0.0; v.len()];
                    e[0] = 1.0;
                    e
                }
            })
            .collect()
    }
}

/// Face/no-face classifier with a calibrated threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceDetector {
    weights: Weights,
    pub threshold: f64,
}

impl FaceDetector {
    pub fn scores(&self, images: &[Image]) -> Vec<f64> {
        self.weights.run(images).iter().map(|z| sigmoid(z[0] as f64)).collect()
    }

    pub fn detect(&self, images: &[Image]) -> Vec<bool> {
        self.scores(images).iter().map(|&s| s >= self.threshold).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Uniform noise images.
pub fn noise_negatives(shape: Shape, n: usize, rng: &mut Rng) -> Vec<Image> {
    (0..n).map(|_| Image::from_fn(shape, |_, _, _| rng.random::<f32>())).collect()
}

/// The image cut into a 4×4 grid of tiles, tiles permuted.
pub fn shuffled_tiles(x: &Image, rng: &mut Rng) -> Image {
    let (th, tw) = (x.height() / 4, x.width() / 4);
    let mut order: Vec<usize> = (0..16).collect();
    order.shuffle(rng);
    let mut out = x.clone();
    for (dst, &src) in order.iter().enumerate() {
        let (sy, sx) = (src / 4 * th, src % 4 * tw);
        let (dy, dx) = (dst / 4 * th, dst % 4 * tw);
        for y in 0..th {
            for xx in 0..tw {
                for c in 0..x.channels() {
                    out.set(dy + y, dx + xx, c, x.get(sy + y, sx + xx, c));
                }
            }
        }
    }
    out
}

fn check_finite(g: &[f32], what: &str, step: usize) -> Result<()> {
    match first_non_finite(g) {
        Some(i) => Err(Error::NonFinite { context: format!("{what} gradient at step {step}"), index: i }),
        None => Ok(()),
    }
}

fn train_embedder(data: &[(Image, usize)], nid: usize, cfg: &SurrogateConfig) -> Result<IdentityEmbedder> {
    let s = data[0].0.shape();
    let spec = ConvNetSpec { in_channels: s.channels, height: s.height, width: s.width, conv_widths: vec![16, 32, 32], dense: vec![cfg.embed_dim, nid] };
    let net = ConvNet::new(spec.clone());
    let mut rng = rng::rng(rng::derive_str(cfg.seed, "embedder"));
    let mut params = net.init(&mut rng);
    let mut opt = Adam::<f32>::new(params.len(), cfg.learning_rate);
    let b = cfg.batch_size;
    for step in 0..cfg.embed_steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let refs: Vec<&Image> = idx.iter().map(|&i| &data[i].0).collect();
        let trace = net.forward(&params, &Tensor::from_images(&refs, 1.0, 0.0));
        let logits = trace.outputs.last().expect("head");
        let mut d = Matrix::zeros(b, nid);
        for (r, &i) in idx.iter().enumerate() {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f32::MIN, f32::max);
            let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
            for k in 0..nid {
                let p = (row[k] - m).exp() / z;
                d.data[r * nid + k] = (p - if k == data[i].1 { 1.0 } else { 0.0 }) / b as f32;
            }
        }
        let g = net.backward(&params, &trace, &d);
        check_finite(&g, "embedder", step)?;
        opt.step(&mut params, &g);
    }
    let weights = Weights { spec, params };
    let feats = weights.run(&data.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>());
    let mut center = vec![0.0f32; cfg.embed_dim];
    for f in &feats {
        for (c, v) in center.iter_mut().zip(f) {
            *c += v / feats.len() as f32;
        }
    }
    Ok(IdentityEmbedder { weights, center, identities: nid })
}

fn train_detector(data: &[(Image, usize)], calib: &[Image], cfg: &SurrogateConfig) -> Result<FaceDetector> {
    let s = data[0].0.shape();
    let spec = ConvNetSpec { in_channels: s.channels, height: s.height, width: s.width, conv_widths: vec![8, 16], dense: vec![1] };
    let net = ConvNet::new(spec.clone());
    let mut rng = rng::rng(rng::derive_str(cfg.seed, "detector"));
    let mut params = net.init(&mut rng);
    let mut opt = Adam::<f32>::new(params.len(), cfg.learning_rate);
    let b = cfg.batch_size;
    for step in 0..cfg.detector_steps {
        let mut batch: Vec<Image> = (0..b).map(|_| data[rng.random_range(0..data.len())].0.clone()).collect();
        let half = b / 2;
        batch.extend(noise_negatives(s, half, &mut rng));
        for i in half..b {
            let t = shuffled_tiles(&batch[i], &mut rng);
            batch.push(t);
        }
        let refs: Vec<&Image> = batch.iter().collect();
        let trace = net.forward(&params, &Tensor::from_images(&refs, 1.0, 0.0));
        let z = trace.outputs.last().expect("head");
        let n = batch.len();
        let d = Matrix { rows: n, cols: 1, data: (0..n).map(|r| ((sigmoid(z.data[r] as f64) - if r < b { 1.0 } else { 0.0 }) / n as f64) as f32).collect() };
        let g = net.backward(&params, &trace, &d);
        check_finite(&g, "detector", step)?;
        opt.step(&mut params, &g);
    }
    let mut det = FaceDetector { weights: Weights { spec, params }, threshold: 0.5 };
    let mut sc = det.scores(calib);
    sc.sort_by(f64::total_cmp);
    // At most `false_failure_rate` of clean images may fall below; never
    // stricter than an even-odds decision.
    let k = (cfg.false_failure_rate * sc.len() as f64).floor() as usize;
    det.threshold = sc[k.min(sc.len() - 1)].min(0.5);
    Ok(det)
}

/// Trains both surrogates on `(image, identity)` pairs with identities
/// `0..n`. A `calibration_fraction` share of each identity is held out of
/// training and used only to set the detector threshold.
pub fn train_surrogates(dataset: &[(Image, usize)], config: &SurrogateConfig) -> Result<(IdentityEmbedder, FaceDetector)> {
    let nid = dataset.iter().map(|(_, l)| l + 1).max().ok_or(Error::Empty("surrogate dataset"))?;
    let mut per = vec![Vec::new(); nid];
    for (x, l) in dataset {
        per[*l].push(x);
    }
    if nid < 2 || per.iter().any(|v| v.len() < 16) {
        return Err(Error::invalid("surrogates need at least 2 identities with 16 images each"));
    }
    let shape = dataset[0].0.shape();
    if shape.height % 8 != 0 || shape.width % 8 != 0 {
        return Err(Error::invalid("surrogate images need sides divisible by 8"));
    }
    if let Some((bad, _)) = dataset.iter().find(|(x, _)| x.shape() != shape) {
        return Err(Error::shape(shape, bad.shape()));
    }
    let (mut train, mut calib) = (Vec::new(), Vec::new());
    for (l, imgs) in per.iter().enumerate() {
        let hold = ((imgs.len() as f64 * config.calibration_fraction).round() as usize).clamp(1, imgs.len() - 1);
        let cut = imgs.len() - hold;
        train.extend(imgs[..cut].iter().map(|x| ((*x).clone(), l)));
        calib.extend(imgs[cut..].iter().map(|x| (*x).clone()));
    }
    let emb = train_embedder(&train, nid, config)?;
    let det = train_detector(&train, &calib, config)?;
    Ok((emb, det))
}

/// Mean within-identity cosine minus mean cross-identity cosine.
pub fn embedding_margin(embedder: &IdentityEmbedder, labeled: &[(Image, usize)]) -> f64 {
    let e = embedder.embed(&labeled.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>());
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..e.len() {
        for j in 0..e.len() {
            if i == j {
                continue;
            }
            let c: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
            if labeled[i].1 == labeled[j].1 {
                same += c;
                ns += 1;
            } else {
                diff += c;
                nd += 1;
            }
        }
    }
    same / ns.max(1) as f64 - diff / nd.max(1) as f64
}

/// Balanced accuracy on clean positives versus equally many noise and
/// shuffled-tile negatives.
pub fn detector_accuracy(detector: &FaceDetector, clean: &[Image], seed: u64) -> f64 {
    let mut rng = rng::rng(seed);
    let half = clean.len() / 2;
    let mut neg = noise_negatives(clean[0].shape(), half, &mut rng);
    neg.extend(clean[half..].iter().map(|x| shuffled_tiles(x, &mut rng)));
    let tp = detector.detect(clean).iter().filter(|&&d| d).count() as f64 / clean.len() as f64;
    let tn = detector.detect(&neg).iter().filter(|&&d| !d).count() as f64 / neg.len() as f64;
    0.5 * (tp + tn)
}
