//! Single-file checkpoints.
//!
//! Layout: 8-byte magic `PDIFFCK1`, little-endian `u64` metadata length, the
//! metadata as JSON, then every parameter as little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserModel, DiffusionSchedule, Token, UNet, UNetConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDIFFCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleRecord {
    pub fn of(s: &DiffusionSchedule) -> Self {
        Self { t_max: s.t_max(), beta_start: s.beta_start, beta_end: s.beta_end }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Binding written by personalization: which token was fine-tuned and on
/// which identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub token: Token,
    pub identity_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub unet: UNetConfig,
    pub schedule: ScheduleRecord,
    pub param_count: usize,
    pub param_sha256: String,
    #[serde(default)]
    pub identity: Option<IdentityRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: DiffusionSchedule,
    pub identity: Option<IdentityRecord>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &DenoiserModel, schedule: &DiffusionSchedule, identity: Option<IdentityRecord>) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: 1,
        unet: model.config().clone(),
        schedule: ScheduleRecord::of(schedule),
        param_count: model.params.len(),
        param_sha256: model.checksum(),
        identity,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * model.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in &model.params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.as_ref().with_extension("partial");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(body)?;
    if meta.format_version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint version {}", meta.format_version)));
    }
    let raw = &bytes[16 + len..];
    if raw.len() != 4 * meta.param_count {
        return Err(Error::Format(format!("expected {} parameters, found {} bytes", meta.param_count, raw.len())));
    }
    let params: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let net = UNet::new(meta.unet.clone())?;
    if net.param_count() != params.len() {
        return Err(Error::Format("parameter count does not match architecture".into()));
    }
    let model = DenoiserModel { net, params };
    if model.checksum() != meta.param_sha256 {
        return Err(Error::Format("parameter checksum mismatch".into()));
    }
    Ok(Checkpoint { model, schedule: meta.schedule.build()?, identity: meta.identity })
}
