//! Anti-personalization defenses: budgeted PGD inside the alternating
//! surrogate/perturbation loop, with optional high-frequency budget masks and
//! greedy timestep selection.

mod aspl;
mod budget;
mod mask;
mod pgd;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use aspl::{aspl_defend, AsplConfig, AsplCounters, ProtectedSet};
pub use budget::{pgd_update, project, FreqMask, InitMode, PerturbationBudget, BUDGET_TOL};
pub use mask::make_hf_mask;
pub use pgd::{cond_loss, cond_loss_grad, cond_loss_grad_f64, init_delta, pgd_attack, TimestepSelector, GREEDY_CANDIDATES};

use crate::diffusion::Token;
use crate::error::{Error, Result};
use crate::image::{export_set_dir, read_image_set, write_image_set, Image};

/// Sidecar written next to an exported protected set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectedManifest {
    pub token: Token,
    pub budget: PerturbationBudget,
    /// The loop settings; the reference images themselves are not stored.
    pub aspl: Option<AsplConfig>,
    #[serde(default)]
    pub clean_ref_count: usize,
    pub counters: AsplCounters,
    pub image_count: usize,
    pub max_abs_delta: Vec<f32>,
}

impl ProtectedSet {
    /// Writes the protected images (`images.pimg` plus PNGs), the originals,
    /// any masks and `manifest.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>, aspl: Option<&AsplConfig>) -> Result<ProtectedManifest> {
        let dir = dir.as_ref();
        self.verify()?;
        export_set_dir(dir, &self.protected())?;
        write_image_set(dir.join("originals.pimg"), &self.originals)?;
        if self.masks.iter().all(Option::is_some) && !self.masks.is_empty() {
            let masks: Vec<Image> = self.masks.iter().flatten().cloned().collect();
            write_image_set(dir.join("masks.pimg"), &masks)?;
        }
        let manifest = ProtectedManifest {
            token: self.token,
            budget: self.budget.clone(),
            aspl: aspl.map(|a| AsplConfig { clean_ref_set: vec![], ..a.clone() }),
            clean_ref_count: aspl.map_or(0, |a| a.clean_ref_set.len()),
            counters: self.counters,
            image_count: self.originals.len(),
            max_abs_delta: self.max_abs_delta(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Reloads an exported set and re-checks its budget claims.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ProtectedManifest)> {
        let dir = dir.as_ref();
        let manifest: ProtectedManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let protected = read_image_set(dir.join("images.pimg"))?;
        let originals = read_image_set(dir.join("originals.pimg"))?;
        if protected.len() != manifest.image_count || originals.len() != manifest.image_count {
            return Err(Error::Format("image counts disagree with the manifest".into()));
        }
        let masks = match read_image_set(dir.join("masks.pimg")) {
            Ok(m) if m.len() == originals.len() => m.into_iter().map(Some).collect(),
            _ => vec![None; originals.len()],
        };
        let deltas = protected.iter().zip(&originals).map(|(p, x)| p.zip_map(x, |a, b| a - b)).collect::<Result<Vec<_>>>()?;
        let set = ProtectedSet { originals, deltas, token: manifest.token, budget: manifest.budget.clone(), masks, counters: manifest.counters };
        set.verify()?;
        Ok((set, manifest))
    }
}
