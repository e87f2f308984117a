//! Conditional denoising diffusion: schedule algebra, the denoiser network,
//! training, ancestral sampling and checkpoints.

mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, IdentityRecord, ScheduleRecord, CHECKPOINT_MAGIC};
pub use model::{from_internal, time_features, to_internal, DenoiserModel, Token, UNet, UNetCache, UNetConfig, NULL_TOKEN};
pub use sample::{denoise_step, reverse_from, reverse_step, sample, NoisePredictor};
pub use schedule::{forward_noise_with, DiffusionSchedule};
pub use train::{denoising_loss, train, with_token, LossEval, NoisedBatch, TrainConfig, TrainOutcome};
