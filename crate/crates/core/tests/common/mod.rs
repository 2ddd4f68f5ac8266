#![allow(dead_code)]

use diffboost::conditioning::Vocabulary;
use diffboost::datagen::{synth_seg_task, SampleRecord, SegTaskSpec};
use diffboost::denoiser::{train_diffusion, Checkpoint, DenoiserConfig, DiffusionTrainConfig, TrainStart, TrainingStage};
use diffboost::diffusion::ScheduleConfig;

pub fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        depth: 2,
        time_embed_dim: 16,
        text_embed_dim: 16,
        edge_branch_channels: vec![4, 8],
        attention_at_bottleneck: true,
        head_channels: 3,
        norm_groups: 4,
    }
}

pub fn task(count: usize, size: usize, seed: u64) -> Vec<SampleRecord> {
    let spec = SegTaskSpec { count, size, ..SegTaskSpec::default() };
    synth_seg_task(&spec, &Vocabulary::default(), seed).unwrap().records
}

pub fn short_training(steps: usize) -> DiffusionTrainConfig {
    DiffusionTrainConfig {
        model: small_denoiser(),
        schedule: ScheduleConfig { steps: 20, beta_start: 1e-3, beta_end: 0.3 },
        learning_rate: 2e-3,
        batch_size: 4,
        epochs: 1000,
        max_steps: Some(steps),
        ..DiffusionTrainConfig::default()
    }
}

/// Barely trained finetuned checkpoint for fast sampling tests.
pub fn finetuned(records: &[SampleRecord]) -> Checkpoint {
    let vocab = Vocabulary::default();
    let pre = train_diffusion(records, &short_training(1), TrainingStage::Pretrained, TrainStart::Fresh(&vocab), 1).unwrap();
    train_diffusion(records, &short_training(1), TrainingStage::Finetuned, TrainStart::From(&pre.checkpoint), 2)
        .unwrap()
        .checkpoint
}
