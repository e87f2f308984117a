use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::ToyDatasetSpec;
use crate::defense::{FreqMask, PerturbationBudget, TimestepSelector};
use crate::diffusion::{DiffusionSchedule, TrainConfig, UNetConfig};
use crate::error::{Error, Result};
use crate::image::Shape;
use crate::metrics::SurrogateConfig;
use crate::purification::PurifierConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Toy(ToyDatasetSpec),
    /// `path/<identity>/*.png`, identities and files in name order. Images
    /// are center-cropped and resized to `size`.
    Folder { path: PathBuf, size: usize, channels: usize },
}

/// Instance index ranges `[start, end)` applied to every identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Identity whose photos are protected and personalized.
    pub target_identity: usize,
    /// Clean reference set for the defender's surrogate.
    pub a: [usize; 2],
    /// Images that get protected and are then used for fine-tuning.
    pub b: [usize; 2],
    /// Held-out identity references for ISM.
    pub c: [usize; 2],
    /// Training and calibration data for the metric surrogates.
    pub surrogate: [usize; 2],
    /// Held-out images for cross-identity ISM and surrogate checks.
    pub heldout: [usize; 2],
}

impl SplitConfig {
    fn ranges(&self) -> [(&'static str, [usize; 2]); 5] {
        [("a", self.a), ("b", self.b), ("c", self.c), ("surrogate", self.surrogate), ("heldout", self.heldout)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn unet(&self, shape: Shape, vocab: usize) -> UNetConfig {
        UNetConfig { height: shape.height, width: shape.width, channels: shape.channels, widths: self.widths.clone(), time_dim: self.time_dim, vocab }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefenseKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "aspl")]
    Aspl,
    #[serde(rename = "aspl+hf-mask")]
    AsplHfMask,
    #[serde(rename = "aspl+greedy-timesteps")]
    AsplGreedy,
    #[serde(rename = "aspl+hf+greedy")]
    AsplHfGreedy,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 5] = [Self::None, Self::Aspl, Self::AsplHfMask, Self::AsplGreedy, Self::AsplHfGreedy];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Aspl => "aspl",
            Self::AsplHfMask => "aspl+hf-mask",
            Self::AsplGreedy => "aspl+greedy-timesteps",
            Self::AsplHfGreedy => "aspl+hf+greedy",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|d| d.name() == name).ok_or_else(|| Error::Config(format!("unknown defense {name:?}")))
    }

    fn hf(self) -> bool {
        matches!(self, Self::AsplHfMask | Self::AsplHfGreedy)
    }

    fn greedy(self) -> bool {
        matches!(self, Self::AsplGreedy | Self::AsplHfGreedy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsplSettings {
    pub iters: usize,
    pub surrogate_finetune_steps: usize,
    pub surrogate_lr: f64,
    /// Selector for the plain variants; the greedy variants use `greedy_k`.
    pub timesteps: TimestepSelector,
    pub greedy_k: usize,
    pub hf_cutoff: f64,
    pub hf_low_mult: f64,
}

impl AsplSettings {
    /// Budget and timestep selector for one defense variant.
    pub fn resolve(&self, kind: DefenseKind, budget: &PerturbationBudget) -> (PerturbationBudget, TimestepSelector) {
        let mut b = budget.clone();
        if kind.hf() {
            b.freq_mask = Some(FreqMask::HighFrequency { cutoff: self.hf_cutoff, low_mult: self.hf_low_mult });
        }
        let sel = if kind.greedy() { TimestepSelector::GreedyTopK { k: self.greedy_k } } else { self.timesteps.clone() };
        (b, sel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSettings {
    /// Samples generated per condition and fine-tune seed.
    pub samples: usize,
    /// `"sks"` (the personalized token) and/or `"null"`.
    pub conditions: Vec<String>,
    pub surrogates: SurrogateConfig,
}

/// Every stochastic stage has its own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub base_model: u64,
    pub defense: u64,
    pub purification: u64,
    /// One fine-tune (and sample set) per seed; samples are pooled.
    pub finetune: Vec<u64>,
    pub sampling: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Where artifacts and results go. Not part of the config hash.
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub defenses: Vec<DefenseKind>,
    pub budget: PerturbationBudget,
    pub aspl: AsplSettings,
    pub purifiers: Vec<PurifierConfig>,
    /// Also run every purifier on the undefended images.
    #[serde(default)]
    pub purify_clean: bool,
    pub finetune: FinetuneSettings,
    pub evaluation: EvaluationSettings,
    pub seeds: SeedConfig,
}

/// Lowercase hex SHA-256 of the canonical JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    // Going through `Value` sorts object keys.
    let canonical = serde_json::to_value(value).and_then(|v| serde_json::to_vec(&v)).expect("config types serialize");
    Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    /// The desk-scale matrix: 8 identities of 32×32 faces, a ~100k-parameter
    /// denoiser, ASPL against the clean baseline and all three purifiers.
    pub fn desk() -> Self {
        let mut train = TrainConfig::new(2e-3, 5000, 16, 0);
        train.cond_dropout = 0.2;
        train.ema_decay = Some(0.999);
        train.cosine_decay = true;
        Self {
            output_dir: PathBuf::from("runs/desk"),
            dataset: DatasetSource::Toy(ToyDatasetSpec::new(8, 48, 1)),
            split: SplitConfig { target_identity: 0, a: [0, 5], b: [5, 10], c: [10, 15], surrogate: [16, 40], heldout: [40, 48] },
            model: ModelConfig { widths: vec![16, 32, 64], time_dim: 16, t_max: 1000, beta_start: 1e-4, beta_end: 0.02, train },
            defenses: vec![DefenseKind::None, DefenseKind::Aspl],
            budget: PerturbationBudget::default(),
            aspl: AsplSettings {
                iters: 50,
                surrogate_finetune_steps: 3,
                surrogate_lr: 1e-4,
                timesteps: TimestepSelector::Window { lo: 100, hi: 400 },
                greedy_k: 3,
                hf_cutoff: 0.25,
                hf_low_mult: 0.2,
            },
            purifiers: vec![PurifierConfig::None, PurifierConfig::by_name("cascade", 32).unwrap(), PurifierConfig::by_name("diffpure", 32).unwrap(), PurifierConfig::by_name("gridpure", 32).unwrap()],
            purify_clean: false,
            finetune: FinetuneSettings { learning_rate: 1e-4, steps: 100, batch_size: None },
            evaluation: EvaluationSettings { samples: 30, conditions: vec!["sks".into()], surrogates: SurrogateConfig::new(3) },
            seeds: SeedConfig { base_model: 0, defense: 7, purification: 5, finetune: vec![11, 12], sampling: 77 },
        }
    }

    /// A seconds-scale configuration on 16×16 images for plumbing tests.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from("runs/smoke");
        c.dataset = DatasetSource::Toy(ToyDatasetSpec { size: 16, ..ToyDatasetSpec::new(4, 24, 1) });
        c.split = SplitConfig { target_identity: 0, a: [0, 2], b: [2, 4], c: [4, 6], surrogate: [6, 22], heldout: [22, 24] };
        c.model.widths = vec![4, 8];
        c.model.time_dim = 8;
        c.model.t_max = 40;
        c.model.beta_end = 0.2;
        c.model.train.steps = 20;
        c.aspl.iters = 2;
        c.aspl.timesteps = TimestepSelector::Uniform;
        c.purifiers = vec![
            PurifierConfig::None,
            PurifierConfig::by_name("cascade", 16).unwrap(),
            PurifierConfig::DiffPure(crate::purification::DiffPureParams { t_star: 5 }),
            PurifierConfig::GridPure(crate::purification::GridPureParams { outer_iters: 2, t_small: 3, ..crate::purification::GridPureParams::for_size(16) }),
        ];
        c.finetune.steps = 5;
        c.evaluation.samples = 4;
        c.evaluation.surrogates = SurrogateConfig { embed_steps: 40, detector_steps: 40, embed_dim: 8, ..SurrogateConfig::new(3) };
        c.seeds.finetune = vec![11];
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file and applies `key.path=value` overrides. Values parse
    /// as TOML where possible and fall back to strings.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::parse_with(&std::fs::read_to_string(path)?, overrides)
    }

    /// This configuration with `key.path=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::parse_with(&self.to_toml()?, overrides)
    }

    fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let c: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Hash of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        content_hash(&c)
    }

    pub fn image_size(&self) -> usize {
        match &self.dataset {
            DatasetSource::Toy(s) => s.size,
            DatasetSource::Folder { size, .. } => *size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let ranges = self.split.ranges();
        for (name, [s, e]) in ranges {
            if s >= e {
                return bad(format!("split {name} is empty"));
            }
        }
        for (i, (n1, r1)) in ranges.iter().enumerate() {
            for (n2, r2) in &ranges[i + 1..] {
                if r1[0] < r2[1] && r2[0] < r1[1] {
                    return bad(format!("splits {n1} and {n2} overlap"));
                }
            }
        }
        if let DatasetSource::Toy(spec) = &self.dataset {
            if let Some((n, _)) = ranges.iter().find(|(_, r)| r[1] > spec.images_per_identity) {
                return bad(format!("split {n} exceeds {} images per identity", spec.images_per_identity));
            }
            if self.split.target_identity >= spec.identities {
                return bad("target identity out of range".into());
            }
        }
        if self.defenses.is_empty() || self.purifiers.is_empty() {
            return bad("need at least one defense and one purifier".into());
        }
        let mut names: Vec<_> = self.purifiers.iter().map(PurifierConfig::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.purifiers.len() {
            return bad("purifier names must be unique".into());
        }
        if let Some(c) = self.evaluation.conditions.iter().find(|c| !matches!(c.as_str(), "sks" | "null")) {
            return bad(format!("unknown condition {c:?}"));
        }
        if self.evaluation.conditions.is_empty() || self.evaluation.samples == 0 || self.seeds.finetune.is_empty() {
            return bad("need conditions, samples and at least one fine-tune seed".into());
        }
        let schedule = self.model.schedule()?;
        let size = self.image_size();
        for p in &self.purifiers {
            p.validate(&schedule, size, size)?;
        }
        self.budget.validate()?;
        self.model.train.validate()
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}").parse::<toml::Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = doc;
    for k in parents {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{k} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
