//! Purifiers: a classical filter cascade and two diffusion-based cleaners.

mod diffusion;
mod filters;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use self::diffusion::{blend, diffpure, extract_grids, grid_origins, gridpure, merge_grids, DiffPureParams, GridPureParams};
pub use self::filters::{bilateral_filter, box_filter, cascade_purify, guided_filter, CascadeParams};

use crate::diffusion::{DenoiserModel, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum PurifierConfig {
    /// Pass-through; the "no purification" arm of an experiment.
    None,
    Cascade(CascadeParams),
    DiffPure(DiffPureParams),
    GridPure(GridPureParams),
}

impl PurifierConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Cascade(_) => "cascade",
            Self::DiffPure(_) => "diffpure",
            Self::GridPure(_) => "gridpure",
        }
    }

    /// Default parameters for a variant name, sized for `size`×`size` images.
    pub fn by_name(name: &str, size: usize) -> Result<Self> {
        Ok(match name {
            "none" => Self::None,
            "cascade" => Self::Cascade(CascadeParams::default()),
            "diffpure" => Self::DiffPure(DiffPureParams::default()),
            "gridpure" => Self::GridPure(GridPureParams::for_size(size)),
            other => return Err(Error::invalid(format!("unknown purifier {other:?}"))),
        })
    }

    pub fn needs_model(&self) -> bool {
        matches!(self, Self::DiffPure(_) | Self::GridPure(_))
    }

    pub fn validate(&self, schedule: &DiffusionSchedule, h: usize, w: usize) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Cascade(p) => p.validate(),
            Self::DiffPure(p) => schedule.check_t(p.t_star),
            Self::GridPure(p) => p.validate(schedule, h, w),
        }
    }
}

/// Purifies one image. `model` is required by the diffusion variants.
pub fn purify(config: &PurifierConfig, model: Option<&DenoiserModel>, x: &Image, schedule: &DiffusionSchedule, seed: u64) -> Result<Image> {
    let need = || model.ok_or_else(|| Error::invalid(format!("{} needs a purification model", config.name())));
    match config {
        PurifierConfig::None => Ok(x.clone()),
        PurifierConfig::Cascade(p) => cascade_purify(x, p),
        PurifierConfig::DiffPure(p) => diffpure(need()?, x, p.t_star, schedule, seed),
        PurifierConfig::GridPure(p) => gridpure(need()?, x, p, schedule, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifiedManifest {
    pub purifier: PurifierConfig,
    pub seed: u64,
    pub image_count: usize,
    pub image_seeds: Vec<u64>,
    /// Informational only; never part of experiment results.
    pub seconds_per_image: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PurifiedSet {
    pub images: Vec<Image>,
    pub manifest: PurifiedManifest,
}

/// Purifies a set; image `i` uses a seed derived from `(seed, i)`.
pub fn purify_set(config: &PurifierConfig, model: Option<&DenoiserModel>, images: &[Image], schedule: &DiffusionSchedule, seed: u64) -> Result<PurifiedSet> {
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    config.validate(schedule, images[0].height(), images[0].width())?;
    let mut out = Vec::with_capacity(images.len());
    let mut seeds = Vec::with_capacity(images.len());
    let mut secs = Vec::with_capacity(images.len());
    for (i, x) in images.iter().enumerate() {
        let s = rng::derive(seed, i as u64);
        let t0 = Instant::now();
        out.push(purify(config, model, x, schedule, s)?);
        secs.push(t0.elapsed().as_secs_f64());
        seeds.push(s);
    }
    let manifest = PurifiedManifest { purifier: config.clone(), seed, image_count: out.len(), image_seeds: seeds, seconds_per_image: secs };
    Ok(PurifiedSet { images: out, manifest })
}

impl PurifiedSet {
    /// Writes `images.pimg`, one PNG per image and `manifest.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        crate::image::export_set_dir(dir.as_ref(), &self.images)?;
        std::fs::write(dir.as_ref().join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let images = crate::image::read_image_set(dir.as_ref().join("images.pimg"))?;
        let manifest: PurifiedManifest = serde_json::from_slice(&std::fs::read(dir.as_ref().join("manifest.json"))?)?;
        if manifest.image_count != images.len() {
            return Err(Error::Format(format!("manifest lists {} images, found {}", manifest.image_count, images.len())));
        }
        Ok(Self { images, manifest })
    }
}
