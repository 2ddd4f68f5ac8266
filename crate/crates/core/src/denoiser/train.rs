use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingStage};
use super::model::{DenoiserConfig, DualBranchDenoiser};
use crate::conditioning::{edges_from_mask, Vocabulary};
use crate::datagen::SampleRecord;
use crate::diffusion::{q_sample, to_internal, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::grids_to_tensor;
use crate::rng::{derive_seed, seeded, standard_normal_grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Train only the edge branch and its fusion projections.
    pub freeze_main: bool,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

impl DiffusionTrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::desk(),
            learning_rate: 1e-5,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            freeze_main: false,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            learning_rate: 1e-6,
            epochs: 100,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive and weight decay nonnegative".into()));
        }
        Ok(())
    }
}

/// Where training starts.
#[derive(Debug, Clone, Copy)]
pub enum TrainStart<'a> {
    Fresh(&'a Vocabulary),
    From(&'a Checkpoint),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean simple loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// One minibatch with its noise draws fixed, so the loss is a deterministic
/// function of the parameters.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Vec<Array2<f64>>,
    pub steps: Vec<usize>,
    pub noise: Vec<Array2<f64>>,
    pub token_ids: Vec<Vec<usize>>,
    pub edges: Vec<Array2<f64>>,
}

impl TrainBatch {
    /// Draws `t` and the noise for each item from `rng`. `x0` is in `[0, 1]`.
    pub fn draw<R: Rng + ?Sized>(
        items: &[(&Array2<f64>, Vec<usize>, &Array2<f64>)],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Self {
        let mut b = TrainBatch {
            x0: Vec::with_capacity(items.len()),
            steps: Vec::with_capacity(items.len()),
            noise: Vec::with_capacity(items.len()),
            token_ids: Vec::with_capacity(items.len()),
            edges: Vec::with_capacity(items.len()),
        };
        for (x0, ids, edge) in items {
            b.steps.push(rng.random_range(1..=schedule.steps()));
            b.noise.push(standard_normal_grid(rng, x0.dim()));
            b.x0.push(to_internal(x0));
            b.token_ids.push(ids.clone());
            b.edges.push((*edge).clone());
        }
        b
    }

    /// Scalar simple loss of `model` on this batch, differentiable in the
    /// model parameters.
    pub fn loss(&self, model: &DualBranchDenoiser, schedule: &NoiseSchedule) -> Result<Tensor> {
        let mut xts = Vec::with_capacity(self.x0.len());
        for ((x0, &t), eps) in self.x0.iter().zip(&self.steps).zip(&self.noise) {
            xts.push(q_sample(x0, t, eps, schedule)?.xt);
        }
        let dev = model.params().device().clone();
        let dtype = model.dtype();
        let xt = grids_to_tensor(&xts.iter().collect::<Vec<_>>(), dtype, &dev)?;
        let eps = grids_to_tensor(&self.noise.iter().collect::<Vec<_>>(), dtype, &dev)?;
        let edge = grids_to_tensor(&self.edges.iter().collect::<Vec<_>>(), dtype, &dev)?;
        let text = model.embed_ids(&self.token_ids)?;
        let pred = model.forward_tensors(&xt, &self.steps, &text, &edge)?;
        Ok((pred - eps)?.sqr()?.mean_all()?)
    }
}

/// Edge map used for training at each stage: extracted edges for
/// pretraining, mask boundaries for finetuning.
fn stage_edge(record: &SampleRecord, stage: TrainingStage) -> Result<Array2<f64>> {
    match stage {
        TrainingStage::Pretrained => Ok(record.edge.values().clone()),
        TrainingStage::Finetuned => Ok(edges_from_mask(record.mask_or_err()?).into_inner()),
    }
}

/// Trains the denoiser with the simple objective. Every item is visited once
/// per epoch in a seeded order; each visit draws a fresh step and noise.
pub fn train_diffusion(
    data: &[SampleRecord],
    config: &DiffusionTrainConfig,
    stage: TrainingStage,
    start: TrainStart<'_>,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    for r in data {
        r.validate()?;
    }
    let (model, schedule_cfg, base_step) = match (start, stage) {
        (TrainStart::Fresh(_), TrainingStage::Finetuned) => {
            return Err(Error::InvalidConfig("finetuning needs a pretrained checkpoint to start from".into()));
        }
        (TrainStart::Fresh(vocab), TrainingStage::Pretrained) => (
            DualBranchDenoiser::new(&config.model, vocab, config.schedule.steps, DType::F32, seed)?,
            config.schedule,
            0,
        ),
        (TrainStart::From(ckpt), _) => (ckpt.instantiate(DType::F32)?, ckpt.schedule, ckpt.step),
    };
    let schedule = schedule_cfg.build()?;
    let vocab = model.vocab().clone();

    let mut items = Vec::with_capacity(data.len());
    for r in data {
        items.push((&r.image, r.triplet.token_ids(&vocab)?, stage_edge(r, stage)?));
    }
    let vars = if config.freeze_main {
        model.params().vars_where(DualBranchDenoiser::is_edge_param)
    } else {
        model.params().vars()
    };
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;

    let mut order_rng = seeded(derive_seed(seed, "diffusion-order", 0));
    let mut noise_rng = seeded(derive_seed(seed, "diffusion-noise", 0));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let budget = config.max_steps.unwrap_or(usize::MAX);
    let mut losses = Vec::new();
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            if losses.len() >= budget {
                break 'epochs;
            }
            let batch_items: Vec<_> = chunk
                .iter()
                .map(|&i| (items[i].0, items[i].1.clone(), &items[i].2))
                .collect();
            let batch = TrainBatch::draw(&batch_items, &schedule, &mut noise_rng);
            let loss = batch.loss(&model, &schedule)?;
            opt.backward_step(&loss)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Validation(format!("loss diverged at epoch {epoch}")));
            }
            losses.push(value);
        }
        if let Some(last) = losses.last() {
            log::debug!("{stage} epoch {epoch}: loss {last:.5}");
        }
    }
    let checkpoint = Checkpoint::from_model(&model, schedule_cfg, stage, seed, base_step + losses.len() as u64)?;
    Ok(TrainOutcome { checkpoint, losses })
}

/// Mean simple loss with each item's own edge map and with edge maps
/// cyclically shifted to a different item, over the same noise draws.
pub fn edge_sensitivity(
    model: &DualBranchDenoiser,
    schedule: &NoiseSchedule,
    data: &[SampleRecord],
    stage: TrainingStage,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.len() < 2 {
        return Err(Error::Argument("need at least two records to permute edges".into()));
    }
    let vocab = model.vocab();
    let mut rng = seeded(derive_seed(seed, "edge-sensitivity", 0));
    let (mut own, mut shifted) = (0.0, 0.0);
    let chunk = 16;
    let mut done = 0;
    while done < draws {
        let n = chunk.min(draws - done);
        let mut items = Vec::with_capacity(n);
        let mut other = Vec::with_capacity(n);
        for k in 0..n {
            let i = (done + k) % data.len();
            let j = (i + 1 + (done + k) / data.len()) % data.len();
            let j = if j == i { (i + 1) % data.len() } else { j };
            items.push((&data[i].image, data[i].triplet.token_ids(vocab)?, stage_edge(&data[i], stage)?));
            other.push(stage_edge(&data[j], stage)?);
        }
        let refs: Vec<_> = items.iter().map(|(x, ids, e)| (*x, ids.clone(), e)).collect();
        let batch = TrainBatch::draw(&refs, schedule, &mut rng);
        let permuted = TrainBatch {
            edges: other,
            ..batch.clone()
        };
        let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        own += scalar(batch.loss(model, schedule)?)? * n as f64;
        shifted += scalar(permuted.loss(model, schedule)?)? * n as f64;
        done += n;
    }
    Ok((own / draws as f64, shifted / draws as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_seg_task, SegTaskSpec};

    fn tiny_config() -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            model: DenoiserConfig {
                base_channels: 8,
                depth: 2,
                time_embed_dim: 16,
                text_embed_dim: 8,
                edge_branch_channels: vec![4, 8],
                attention_at_bottleneck: true,
                head_channels: 3,
                norm_groups: 4,
            },
            schedule: ScheduleConfig {
                steps: 20,
                ..ScheduleConfig::default()
            },
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 4,
            ..DiffusionTrainConfig::pretrain_default()
        }
    }

    fn task(count: usize) -> Vec<SampleRecord> {
        let spec = SegTaskSpec {
            count,
            size: 16,
            ..SegTaskSpec::default()
        };
        synth_seg_task(&spec, &Vocabulary::default(), 5).unwrap().records
    }

    #[test]
    fn default_hyperparameters() {
        let f = DiffusionTrainConfig::finetune_default();
        assert_eq!(f.learning_rate, 1e-6);
        assert_eq!(f.epochs, 100);
        assert_eq!(f.batch_size, 16);
        assert_eq!(DiffusionTrainConfig::pretrain_default().learning_rate, 1e-5);
    }

    #[test]
    fn finetune_requires_checkpoint() {
        let v = Vocabulary::default();
        let err = train_diffusion(&task(2), &tiny_config(), TrainingStage::Finetuned, TrainStart::Fresh(&v), 1)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn out_of_range_data_rejected() {
        let v = Vocabulary::default();
        let mut data = task(2);
        data[1].image[[0, 0]] = 1.5;
        let err = train_diffusion(&data, &tiny_config(), TrainingStage::Pretrained, TrainStart::Fresh(&v), 1)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn deterministic_and_staged() {
        let v = Vocabulary::default();
        let data = task(6);
        let cfg = tiny_config();
        let a = train_diffusion(&data, &cfg, TrainingStage::Pretrained, TrainStart::Fresh(&v), 4).unwrap();
        let b = train_diffusion(&data, &cfg, TrainingStage::Pretrained, TrainStart::Fresh(&v), 4).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 6);
        assert_eq!(a.checkpoint.stage, TrainingStage::Pretrained);
        let f = train_diffusion(&data, &cfg, TrainingStage::Finetuned, TrainStart::From(&a.checkpoint), 4).unwrap();
        assert_eq!(f.checkpoint.stage, TrainingStage::Finetuned);
        assert_eq!(f.checkpoint.step, 12);
    }

    #[test]
    fn frozen_main_branch_is_untouched() {
        let v = Vocabulary::default();
        let data = task(4);
        let cfg = tiny_config();
        let pre = train_diffusion(&data, &cfg, TrainingStage::Pretrained, TrainStart::Fresh(&v), 2).unwrap();
        let frozen = DiffusionTrainConfig {
            freeze_main: true,
            ..cfg
        };
        let fin = train_diffusion(&data, &frozen, TrainingStage::Finetuned, TrainStart::From(&pre.checkpoint), 2)
            .unwrap();
        for (a, b) in pre.checkpoint.params.iter().zip(&fin.checkpoint.params) {
            if DualBranchDenoiser::is_edge_param(&a.name) {
                continue;
            }
            assert_eq!(a, b, "{} changed", a.name);
        }
        assert!(pre
            .checkpoint
            .params
            .iter()
            .zip(&fin.checkpoint.params)
            .any(|(a, b)| a.name.starts_with("fusion.") && a != b));
    }
}
