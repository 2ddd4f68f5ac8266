//! The dual-branch conditional noise predictor, its training, sampling and
//! checkpoints.

mod checkpoint;
mod model;
mod sample;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, TrainingStage, DENOISER_KIND};
pub use model::{DenoiserConfig, DualBranchDenoiser, GenerationCondition};
pub use sample::generate;
pub use train::{edge_sensitivity, train_diffusion, DiffusionTrainConfig, TrainBatch, TrainOutcome, TrainStart};
