use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{content_hash, DatasetSource, DefenseKind, ExperimentConfig};
use super::dataset::generate_toy_dataset;
use super::report::{render_report, CellReport, ConditionResult, ExperimentReport, Provenance};
use crate::defense::{aspl_defend, AsplConfig, PerturbationBudget, ProtectedSet};
use crate::diffusion::{load_checkpoint, save_checkpoint, train, DenoiserModel, DiffusionSchedule, IdentityRecord, Token, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::image::{read_image_set, write_image_set, Image};
use crate::metrics::{evaluate, hf_energy, ism, train_surrogates, QualityModel, Surrogates, HF_CUTOFF};
use crate::personalization::{finetune, generate, FinetuneConfig, InstanceSet};
use crate::purification::{purify_set, PurifiedSet, PurifierConfig};
use crate::rng;

/// How often each stage actually ran, and how often the cache answered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub base_trainings: usize,
    pub surrogate_trainings: usize,
    pub defenses: usize,
    pub purifications: usize,
    pub finetunes: usize,
    pub evaluations: usize,
    pub cache_hits: usize,
}

impl RunCounters {
    pub fn computations(&self) -> usize {
        self.base_trainings + self.surrogate_trainings + self.defenses + self.purifications + self.finetunes + self.evaluations
    }
}

/// Written next to the results as `run_log.json`; holds the timing data
/// that the results file leaves out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub counters: RunCounters,
    pub seconds: f64,
    pub stage_seconds: Vec<(String, f64)>,
    pub finished_unix: u64,
}

pub struct RunOutcome {
    pub report: ExperimentReport,
    pub log: RunLog,
    pub table: String,
    pub figures: Vec<PathBuf>,
}

/// Instance images grouped by identity.
pub fn load_dataset(source: &DatasetSource) -> Result<Vec<Vec<Image>>> {
    match source {
        DatasetSource::Toy(spec) => Ok(generate_toy_dataset(spec)?.images),
        DatasetSource::Folder { path, size, channels } => {
            let mut ids: Vec<PathBuf> = std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
            ids.sort();
            if ids.len() < 4 {
                return Err(Error::invalid("an image folder needs at least 4 identity subdirectories"));
            }
            ids.iter()
                .map(|d| {
                    let mut files: Vec<PathBuf> = std::fs::read_dir(d)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                        .collect();
                    files.sort();
                    files.iter().map(|f| Ok(Image::load_png(f, *channels)?.center_crop_resize(*size))).collect()
                })
                .collect()
        }
    }
}

/// Token of identity `i` in the base vocabulary.
pub fn identity_token(i: usize) -> Token {
    i + 1
}

fn slice(images: &[Vec<Image>], id: usize, r: [usize; 2]) -> Result<Vec<Image>> {
    images
        .get(id)
        .and_then(|v| v.get(r[0]..r[1]))
        .map(<[Image]>::to_vec)
        .ok_or_else(|| Error::Config(format!("identity {id} has no instances {}..{}", r[0], r[1])))
}

fn short(hash: &str) -> &str {
    &hash[..12]
}

/// Builds `dir` through a scratch sibling so a crash never leaves a
/// half-written entry that looks complete.
fn atomic_dir(dir: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    build(&tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

/// One experiment: owns the loaded data and the artifact cache under
/// `output_dir/cache`.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub schedule: DiffusionSchedule,
    pub images: Vec<Vec<Image>>,
    pub counters: RunCounters,
    pub progress: bool,
    stage_seconds: Vec<(String, f64)>,
    base: Option<(DenoiserModel, String)>,
    surrogates: Option<(Surrogates, String)>,
    protected: Vec<(DefenseKind, (ProtectedSet, String, String))>,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let images = load_dataset(&config.dataset)?;
        let s = &config.split;
        if s.target_identity >= images.len() {
            return Err(Error::Config("target identity out of range".into()));
        }
        for id in 0..images.len() {
            for r in [s.a, s.b, s.c, s.surrogate, s.heldout] {
                slice(&images, id, r)?;
            }
        }
        let schedule = config.model.schedule()?;
        Ok(Self { config, schedule, images, counters: RunCounters::default(), progress: false, stage_seconds: vec![], base: None, surrogates: None, protected: vec![] })
    }

    fn note(&self, msg: &str) {
        if self.progress {
            eprintln!("[purify] {msg}");
        }
    }

    fn timed<T>(&mut self, label: String, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self);
        self.stage_seconds.push((label, t0.elapsed().as_secs_f64()));
        out
    }

    fn cache(&self) -> PathBuf {
        self.config.output_dir.join("cache")
    }

    /// The personalized token: one past the base vocabulary.
    pub fn sks_token(&self) -> Token {
        self.images.len() + 1
    }

    pub fn target(&self, range: [usize; 2]) -> Result<Vec<Image>> {
        slice(&self.images, self.config.split.target_identity, range)
    }

    /// Metrics of `samples` against the target's references, plus the mean
    /// ISM against every other identity's held-out images.
    pub fn score(&mut self, condition: &str, samples: &[Image]) -> Result<ConditionResult> {
        let sur = self.surrogates()?.0;
        let split = self.config.split.clone();
        let metrics = evaluate(condition, samples, &self.target(split.c)?, &sur)?;
        let mut cross = Vec::new();
        for i in (0..self.images.len()).filter(|&i| i != split.target_identity) {
            cross.extend(ism(samples, &slice(&self.images, i, split.heldout)?, &sur.embedder, &sur.detector)?);
        }
        let cross_ism = (!cross.is_empty()).then(|| cross.iter().sum::<f64>() / cross.len() as f64);
        Ok(ConditionResult { metrics, cross_ism })
    }

    pub fn condition_token(&self, name: &str) -> Token {
        if name == "null" {
            NULL_TOKEN
        } else {
            self.sks_token()
        }
    }

    /// Base denoiser trained on every identity except the target. Also the
    /// purification model and the defender's starting surrogate.
    pub fn base_model(&mut self) -> Result<(DenoiserModel, String)> {
        if let Some(b) = &self.base {
            return Ok(b.clone());
        }
        let c = &self.config;
        let key = content_hash(&json!({"stage": "base", "dataset": c.dataset, "target": c.split.target_identity, "model": c.model, "seed": c.seeds.base_model}));
        let dir = self.cache().join(format!("base-{}", short(&key)));
        let path = dir.join("model.ckpt");
        let model = if path.exists() {
            self.counters.cache_hits += 1;
            load_checkpoint(&path)?.model
        } else {
            self.note("training base model");
            let data: Vec<(Image, Token)> = self
                .images
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != self.config.split.target_identity)
                .flat_map(|(i, v)| v.iter().map(move |x| (x.clone(), identity_token(i))))
                .collect();
            let shape = self.images[0][0].shape();
            let init = DenoiserModel::new(self.config.model.unet(shape, self.images.len() + 1), self.config.seeds.base_model)?;
            let mut tc = self.config.model.train.clone();
            tc.seed = rng::derive_str(self.config.seeds.base_model, "train");
            let schedule = self.schedule.clone();
            let out = self.timed("base".into(), |_| train(&init, &data, &tc, &schedule))?;
            self.counters.base_trainings += 1;
            atomic_dir(&dir, |d| save_checkpoint(d.join("model.ckpt"), &out.model, &schedule, None))?;
            out.model
        };
        self.base = Some((model, key));
        Ok(self.base.clone().expect("just set"))
    }

    /// Identity embedder, face detector and naturalness model, all fitted on
    /// the surrogate split.
    pub fn surrogates(&mut self) -> Result<(Surrogates, String)> {
        if let Some(s) = &self.surrogates {
            return Ok(s.clone());
        }
        let c = &self.config;
        let key = content_hash(&json!({"stage": "surrogates", "dataset": c.dataset, "range": c.split.surrogate, "config": c.evaluation.surrogates}));
        let dir = self.cache().join(format!("surrogates-{}", short(&key)));
        let path = dir.join("surrogates.json");
        let s = if path.exists() {
            self.counters.cache_hits += 1;
            Surrogates::load(&path)?
        } else {
            self.note("training metric surrogates");
            let labeled: Vec<(Image, usize)> = (0..self.images.len())
                .map(|id| slice(&self.images, id, self.config.split.surrogate).map(|v| v.into_iter().map(move |x| (x, id))))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let cfg = self.config.evaluation.surrogates.clone();
            let s = self.timed("surrogates".into(), |_| {
                let (embedder, detector) = train_surrogates(&labeled, &cfg)?;
                let corpus: Vec<Image> = labeled.iter().map(|(x, _)| x.clone()).collect();
                Ok(Surrogates { embedder, detector, quality: QualityModel::fit(&corpus)? })
            })?;
            self.counters.surrogate_trainings += 1;
            atomic_dir(&dir, |d| s.save(d.join("surrogates.json")))?;
            s
        };
        self.surrogates = Some((s, key));
        Ok(self.surrogates.clone().expect("just set"))
    }

    /// The protect set after `kind`; `none` leaves it clean. Returns the set,
    /// its cache key and its directory relative to the output directory.
    pub fn protected(&mut self, kind: DefenseKind) -> Result<(ProtectedSet, String, String)> {
        if let Some((_, p)) = self.protected.iter().find(|(k, _)| *k == kind) {
            return Ok(p.clone());
        }
        let p = self.protect(kind)?;
        self.protected.push((kind, p.clone()));
        Ok(p)
    }

    fn protect(&mut self, kind: DefenseKind) -> Result<(ProtectedSet, String, String)> {
        let (base, base_key) = self.base_model()?;
        let c = self.config.clone();
        let (budget, selector) = c.aspl.resolve(kind, &c.budget);
        let key = if kind == DefenseKind::None {
            content_hash(&json!({"stage": "protect", "dataset": c.dataset, "b": c.split.b, "target": c.split.target_identity}))
        } else {
            content_hash(&json!({"stage": "protect", "base": base_key, "kind": kind, "budget": budget, "selector": selector, "aspl": c.aspl, "a": c.split.a, "b": c.split.b, "seed": c.seeds.defense}))
        };
        let rel = format!("cache/protected/{}-{}", kind.name().replace('+', "_"), short(&key));
        let dir = c.output_dir.join(&rel);
        if dir.exists() {
            self.counters.cache_hits += 1;
            return Ok((ProtectedSet::load(&dir)?.0, key, rel));
        }
        let originals = self.target(c.split.b)?;
        let token = self.sks_token();
        let (set, aspl) = if kind == DefenseKind::None {
            let deltas = originals.iter().map(|x| Image::zeros(x.shape())).collect();
            let n = originals.len();
            (ProtectedSet { originals, deltas, token, budget: PerturbationBudget { eta: 0.0, ..PerturbationBudget::default() }, masks: vec![None; n], counters: Default::default() }, None)
        } else {
            self.note(&format!("defending with {}", kind.name()));
            let mut ac = AsplConfig::new(self.target(c.split.a)?, c.seeds.defense);
            ac.aspl_iters = c.aspl.iters;
            ac.surrogate_finetune_steps = c.aspl.surrogate_finetune_steps;
            ac.surrogate_lr = c.aspl.surrogate_lr;
            ac.timestep_selector = selector;
            let schedule = self.schedule.clone();
            let set = self.timed(format!("defend {}", kind.name()), |_| aspl_defend(&base, &originals, token, &budget, &ac, &schedule))?;
            self.counters.defenses += 1;
            (set, Some(ac))
        };
        atomic_dir(&dir, |d| set.export(d, aspl.as_ref()).map(|_| ()))?;
        Ok((set, key, rel))
    }

    /// Purified copy of a protected set; `none` returns the protected images.
    pub fn purified(&mut self, kind: DefenseKind, purifier: &PurifierConfig) -> Result<(Vec<Image>, String, String)> {
        let (set, pkey, prel) = self.protected(kind)?;
        if *purifier == PurifierConfig::None {
            return Ok((set.protected(), pkey, prel));
        }
        let base_key = if purifier.needs_model() { Some(self.base_model()?.1) } else { None };
        let seed = self.config.seeds.purification;
        let key = content_hash(&json!({"stage": "purify", "protected": pkey, "purifier": purifier, "model": base_key, "seed": seed}));
        let rel = format!("cache/purified/{}-{}-{}", kind.name().replace('+', "_"), purifier.name(), short(&key));
        let dir = self.config.output_dir.join(&rel);
        if dir.exists() {
            self.counters.cache_hits += 1;
            return Ok((PurifiedSet::load(&dir)?.images, key, rel));
        }
        self.note(&format!("purifying {} with {}", kind.name(), purifier.name()));
        let model = if purifier.needs_model() { Some(self.base_model()?.0) } else { None };
        let schedule = self.schedule.clone();
        let out = self.timed(format!("purify {} {}", kind.name(), purifier.name()), |_| purify_set(purifier, model.as_ref(), &set.protected(), &schedule, seed))?;
        self.counters.purifications += 1;
        atomic_dir(&dir, |d| out.export(d))?;
        Ok((out.images, key, rel))
    }

    /// Fine-tunes on `images` once per fine-tune seed, samples every
    /// condition, and scores the pooled samples.
    fn cell(&mut self, kind: DefenseKind, purifier: &PurifierConfig) -> Result<CellReport> {
        let (images, input_key, input_rel) = self.purified(kind, purifier)?;
        let (base, base_key) = self.base_model()?;
        let sur_key = self.surrogates()?.1;
        let c = self.config.clone();
        let key = content_hash(&json!({
            "stage": "cell", "input": input_key, "base": base_key, "surrogates": sur_key, "finetune": c.finetune,
            "evaluation": c.evaluation, "seeds": [c.seeds.finetune, [c.seeds.sampling]], "c": c.split.c, "heldout": c.split.heldout,
        }));
        let rel = format!("cache/cells/{}-{}-{}", kind.name().replace('+', "_"), purifier.name(), short(&key));
        let dir = c.output_dir.join(&rel);
        if dir.join("cell.json").exists() {
            self.counters.cache_hits += 1;
            return Ok(serde_json::from_slice(&std::fs::read(dir.join("cell.json"))?)?);
        }
        self.note(&format!("fine-tuning and evaluating {} / {}", kind.name(), purifier.name()));
        let token = self.sks_token();
        let set = InstanceSet::new(images.clone(), token, format!("identity-{}", c.split.target_identity))?;
        let schedule = self.schedule.clone();
        let mut models = Vec::new();
        let mut samples: Vec<Vec<Image>> = vec![Vec::new(); c.evaluation.conditions.len()];
        for (si, &seed) in c.seeds.finetune.iter().enumerate() {
            let fc = FinetuneConfig { learning_rate: c.finetune.learning_rate, steps: c.finetune.steps, prior_weight: 0.0, prior_images: vec![], seed, batch_size: c.finetune.batch_size };
            let tuned = self.timed(format!("finetune {} {} #{si}", kind.name(), purifier.name()), |_| finetune(&base, &set, &fc, &schedule))?;
            self.counters.finetunes += 1;
            for (ci, cond) in c.evaluation.conditions.iter().enumerate() {
                let tok = self.condition_token(cond);
                let s = rng::derive(rng::derive(c.seeds.sampling, si as u64), ci as u64);
                let label = format!("sample {} {} #{si} {cond}", kind.name(), purifier.name());
                samples[ci].extend(self.timed(label, |_| generate(&tuned, tok, c.evaluation.samples, s, &schedule))?);
            }
            models.push(tuned);
        }
        let conditions = c.evaluation.conditions.iter().zip(&samples).map(|(cond, gen)| self.score(cond, gen)).collect::<Result<Vec<_>>>()?;
        self.counters.evaluations += 1;
        let input_hf_energy = images.iter().map(|x| hf_energy(x, HF_CUTOFF)).collect::<Result<Vec<_>>>()?;
        let report = CellReport {
            defense: kind,
            purifier: purifier.name().to_string(),
            cell_hash: key,
            conditions,
            input_hf_energy,
            protected_dir: Some(self.protected(kind)?.2),
            purified_dir: Some(input_rel),
            error: None,
        };
        atomic_dir(&dir, |d| {
            for (m, seed) in models.iter().zip(&c.seeds.finetune) {
                let id = IdentityRecord { token, identity_id: set.identity_id.clone() };
                save_checkpoint(d.join(format!("finetuned-{seed}.ckpt")), m, &schedule, Some(id))?;
            }
            for (cond, gen) in c.evaluation.conditions.iter().zip(&samples) {
                write_image_set(d.join(format!("samples-{cond}.pimg")), gen)?;
            }
            std::fs::write(d.join("cell.json"), serde_json::to_vec_pretty(&report)?)?;
            Ok(())
        })?;
        Ok(report)
    }

    /// Defense × purifier pairs in report order. The undefended images only
    /// get the `none` purifier unless `purify_clean` is set.
    pub fn cells(&self) -> Vec<(DefenseKind, PurifierConfig)> {
        let mut out = Vec::new();
        for &d in &self.config.defenses {
            for p in &self.config.purifiers {
                if d == DefenseKind::None && *p != PurifierConfig::None && !self.config.purify_clean {
                    continue;
                }
                out.push((d, p.clone()));
            }
        }
        out
    }

    /// Runs every cell. Failures are recorded in their cell and the rest
    /// carry on; only setup errors (data, base model, surrogates) abort.
    pub fn run(&mut self) -> Result<ExperimentReport> {
        self.base_model()?;
        self.surrogates()?;
        let clean_hf_energy = self.target(self.config.split.b)?.iter().map(|x| hf_energy(x, HF_CUTOFF)).collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::new();
        for (d, p) in self.cells() {
            let cell = self.cell(d, &p).unwrap_or_else(|e| {
                self.note(&format!("cell {} / {} failed: {e}", d.name(), p.name()));
                CellReport { defense: d, purifier: p.name().to_string(), cell_hash: String::new(), conditions: vec![], input_hf_energy: vec![], protected_dir: None, purified_dir: None, error: Some(e.to_string()) }
            });
            cells.push(cell);
        }
        Ok(ExperimentReport {
            provenance: Provenance { config_hash: self.config.hash(), version: env!("CARGO_PKG_VERSION").to_string(), seeds: self.config.seeds.clone() },
            clean_hf_energy,
            cells,
        })
    }

    pub fn stage_seconds(&self) -> &[(String, f64)] {
        &self.stage_seconds
    }
}

/// Runs the whole matrix and writes `results.json`, `report.md`,
/// `run_log.json`, `config.toml` and `figures/` into the output directory.
pub fn run_experiment(config: &ExperimentConfig, progress: bool) -> Result<RunOutcome> {
    let t0 = Instant::now();
    let mut p = Pipeline::new(config.clone())?;
    p.progress = progress;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    let report = p.run()?;
    report.save(out.join("results.json"))?;
    let fig_dir = out.join("figures");
    if fig_dir.exists() {
        std::fs::remove_dir_all(&fig_dir)?;
    }
    let rendered = render_report(&report, out, &fig_dir)?;
    std::fs::write(out.join("report.md"), &rendered.table)?;
    let log = RunLog {
        config_hash: config.hash(),
        counters: p.counters,
        seconds: t0.elapsed().as_secs_f64(),
        stage_seconds: p.stage_seconds().to_vec(),
        finished_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    std::fs::write(out.join("run_log.json"), serde_json::to_vec_pretty(&log)?)?;
    Ok(RunOutcome { report, log, table: rendered.table, figures: rendered.figures })
}

/// Reads a set directory's `images.pimg`.
pub fn load_set_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    read_image_set(dir.as_ref().join("images.pimg"))
}
