//! Identity, quality and frequency-domain metrics.

mod quality;
mod spectrum;
mod surrogates;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use quality::{brisque_features, ln_gamma, mscn, QualityModel, FEATURE_COUNT, VARIANCE_FLOOR};
pub use spectrum::{colorize, fourier_spectrum, hf_energy, perturbation_heatmap, perturbation_map, power_spectrum};
pub use surrogates::{detector_accuracy, embedding_margin, noise_negatives, shuffled_tiles, train_surrogates, FaceDetector, IdentityEmbedder, SurrogateConfig};

use crate::error::{Error, Result};
use crate::image::Image;

/// Side of the low-frequency square, as a fraction of the image side.
pub const HF_CUTOFF: f64 = 0.5;

/// Share of images the detector rejects.
pub fn fdfr(images: &[Image], detector: &FaceDetector) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("images"));
    }
    let miss = detector.detect(images).iter().filter(|&&d| !d).count();
    Ok(miss as f64 / images.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-normalized mean of the reference embeddings.
pub fn reference_direction(embedder: &IdentityEmbedder, references: &[Image]) -> Result<Vec<f64>> {
    if references.is_empty() {
        return Err(Error::Empty("reference images"));
    }
    let e = embedder.embed(references);
    let mut m = vec![0.0; embedder.dim()];
    for v in &e {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = dot(&m, &m).sqrt();
    if n > 0.0 {
        m.iter_mut().for_each(|v| *v /= n);
    }
    Ok(m)
}

/// Mean cosine between each detected image's embedding and the mean
/// reference embedding; `None` when nothing is detected.
pub fn ism(generated: &[Image], references: &[Image], embedder: &IdentityEmbedder, detector: &FaceDetector) -> Result<Option<f64>> {
    let r = reference_direction(embedder, references)?;
    let det = detector.detect(generated);
    let kept: Vec<Image> = generated.iter().zip(&det).filter(|(_, &d)| d).map(|(x, _)| x.clone()).collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let e = embedder.embed(&kept);
    Ok(Some((e.iter().map(|v| dot(v, &r)).sum::<f64>() / e.len() as f64).clamp(-1.0, 1.0)))
}

/// Everything needed to score generated images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogates {
    pub embedder: IdentityEmbedder,
    pub detector: FaceDetector,
    pub quality: QualityModel,
}

impl Surrogates {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// One evaluated condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: String,
    pub fdfr: f64,
    /// Over detected images only; absent when none were detected.
    pub ism: Option<f64>,
    /// Naturalness distance over detected images (face-quality stand-in).
    pub face_quality: Option<f64>,
    /// Naturalness distance over all images; higher is worse.
    pub quality: f64,
    pub hf_energy: f64,
    pub sample_count: usize,
}

/// Scores generated samples against identity references.
pub fn evaluate(condition: &str, generated: &[Image], references: &[Image], s: &Surrogates) -> Result<MetricsReport> {
    if generated.is_empty() {
        return Err(Error::Empty("generated images"));
    }
    let det = s.detector.detect(generated);
    let detected: Vec<Image> = generated.iter().zip(&det).filter(|(_, &d)| d).map(|(x, _)| x.clone()).collect();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let scores = generated.iter().map(|x| s.quality.score(x)).collect::<Result<Vec<_>>>()?;
    let face_quality = (!detected.is_empty()).then(|| mean(scores.iter().zip(&det).filter(|(_, &d)| d).map(|(v, _)| *v).collect()));
    Ok(MetricsReport {
        condition: condition.to_string(),
        fdfr: det.iter().filter(|&&d| !d).count() as f64 / generated.len() as f64,
        ism: ism(generated, references, &s.embedder, &s.detector)?,
        face_quality,
        quality: mean(scores),
        hf_energy: mean(generated.iter().map(|x| hf_energy(x, HF_CUTOFF)).collect::<Result<Vec<_>>>()?),
        sample_count: generated.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;

    fn data() -> Vec<(Image, usize)> {
        (0..64)
            .map(|i| {
                let l = i % 2;
                let s = (i / 2) as f32 * 0.01;
                (Image::from_fn(Shape::new(16, 16, 1), |y, x, _| if (l == 0) == (x < 8) { 0.8 - s } else { 0.2 + s + 0.02 * (y % 2) as f32 }), l)
            })
            .collect()
    }

    fn surrogates() -> Surrogates {
        let d = data();
        let cfg = SurrogateConfig { embed_steps: 60, detector_steps: 60, embed_dim: 4, ..SurrogateConfig::new(1) };
        let (embedder, detector) = train_surrogates(&d, &cfg).unwrap();
        let imgs: Vec<Image> = d.iter().map(|(x, _)| x.clone()).collect();
        Surrogates { embedder, detector, quality: QualityModel::fit(&imgs).unwrap() }
    }

    #[test]
    fn detection_extremes_and_self_similarity() {
        let mut s = surrogates();
        let imgs: Vec<Image> = data().into_iter().map(|(x, _)| x).take(6).collect();
        s.detector.threshold = 0.0;
        assert_eq!(fdfr(&imgs, &s.detector).unwrap(), 0.0);
        let one = &imgs[..1];
        assert!((ism(one, one, &s.embedder, &s.detector).unwrap().unwrap() - 1.0).abs() < 1e-9);
        s.detector.threshold = 1.5;
        assert_eq!(fdfr(&imgs, &s.detector).unwrap(), 1.0);
        assert_eq!(ism(&imgs, &imgs, &s.embedder, &s.detector).unwrap(), None);
        let r = evaluate("x", &imgs, &imgs, &s).unwrap();
        assert_eq!((r.fdfr, r.ism, r.face_quality, r.sample_count), (1.0, None, None, 6));
        assert!(fdfr(&[], &s.detector).is_err());
        assert!(ism(&imgs, &[], &s.embedder, &s.detector).is_err());
    }

    #[test]
    fn surrogates_roundtrip_through_json() {
        let s = surrogates();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        s.save(&p).unwrap();
        assert_eq!(Surrogates::load(&p).unwrap(), s);
    }
}
