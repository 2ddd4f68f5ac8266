use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{SegBackboneSpec, SegModel};
use crate::augmentation::{apply_classic, generate_random_patch, mix, AugmentationCache, ClassicTransformSpec};
use crate::datagen::SampleRecord;
use crate::error::{check_shape, Error, Result};
use crate::metrics::{segmentation_row, MetricSet, MetricsReport};
use crate::nn::grids_to_tensor;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    /// Probability that a patch keeps the real image.
    pub alpha: f64,
    /// Mixing patch side; `None` uses a sixth of the image side.
    pub patch_size: Option<usize>,
    /// Variants drawn from per image (the first `n` of the cache).
    pub n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub folds: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            patch_size: None,
            n: 10,
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            dice_weight: 0.5,
            bce_weight: 0.5,
            folds: 3,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("n, epochs and batch_size must be positive".into()));
        }
        if self.patch_size == Some(0) {
            return Err(Error::InvalidConfig("patch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.dice_weight < 0.0 || self.bce_weight < 0.0 {
            return Err(Error::InvalidConfig("bad optimizer or loss weights".into()));
        }
        Ok(())
    }

    pub fn patch_size_for(&self, shape: (usize, usize)) -> usize {
        self.patch_size
            .unwrap_or_else(|| (shape.0.max(shape.1) / 6).max(1))
    }
}

/// Input augmentation used while training.
#[derive(Debug, Clone, Copy, Default)]
pub struct Augment<'a> {
    pub cache: Option<&'a AugmentationCache>,
    pub classic: Option<ClassicTransformSpec>,
}

impl<'a> Augment<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn diffboost(cache: &'a AugmentationCache) -> Self {
        Self {
            cache: Some(cache),
            classic: None,
        }
    }

    pub fn classic(spec: ClassicTransformSpec) -> Self {
        Self {
            cache: None,
            classic: Some(spec),
        }
    }
}

pub struct SegTrainOutcome {
    pub model: SegModel,
    /// Mean loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// Weighted soft-Dice plus binary cross-entropy, from logits.
pub fn segmentation_loss(logits: &Tensor, target: &Tensor, dice_weight: f64, bce_weight: f64) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let z = logits.reshape((b, ()))?;
    let y = target.reshape((b, ()))?;
    let bce = ((z.relu()? - (&z * &y)?)? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?.mean_all()?;
    let p = candle_nn::ops::sigmoid(&z)?;
    let inter = (&p * &y)?.sum(D::Minus1)?;
    let denom = (p.sum(D::Minus1)? + y.sum(D::Minus1)?)?;
    let dice = ((inter * 2.0)? + 1.0)?.div(&(denom + 1.0)?)?;
    let soft_dice = (1.0 - dice)?.mean_all()?;
    Ok(((soft_dice * dice_weight)? + (bce * bce_weight)?)?)
}

/// Trains one model. Each optimizer step visits a batch of training images;
/// with a cache, every image is mixed with one of its variants through a
/// fresh patch mask. Initialization, visiting order and augmentation draw
/// from independent streams derived from `seed`.
pub fn train_segmentation(
    records: &[&SampleRecord],
    augment: Augment<'_>,
    spec: &SegBackboneSpec,
    config: &SegTrainConfig,
    seed: u64,
) -> Result<SegTrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("segmentation training set is empty".into()));
    }
    let shape = records[0].dim();
    for r in records {
        r.validate()?;
        r.mask_or_err()?;
        check_shape(&[shape.0, shape.1], &[r.dim().0, r.dim().1])?;
    }
    if let Some(cache) = augment.cache {
        cache.check_covers(records, config.n)?;
    }
    let patch = config.patch_size_for(shape);

    let model = SegModel::new(spec, DType::F32, derive_seed(seed, "seg-init", 0))?;
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut order_rng = seeded(derive_seed(seed, "seg-order", 0));
    let mut aug_rng = seeded(derive_seed(seed, "seg-augment", 0));
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs * records.len().div_ceil(config.batch_size));
    let dev = model.params().device().clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = records[i];
                let mut image = r.image.clone();
                if let Some(cache) = augment.cache {
                    let entry = cache.entry(&r.case_id).expect("coverage checked");
                    let v = aug_rng.random_range(0..config.n);
                    let m = generate_random_patch(config.alpha, patch, shape, &mut aug_rng)?;
                    image = mix(&r.image, &entry.variants[v].image, &m)?;
                }
                let mut mask = r.mask_or_err()?.clone();
                if let Some(cs) = &augment.classic {
                    let mixed = SampleRecord {
                        image,
                        ..(*r).clone()
                    };
                    let out = apply_classic(&mixed, cs, &mut aug_rng)?;
                    image = out.image;
                    mask = out.mask.expect("labelled record");
                }
                inputs.push(image);
                targets.push(mask.mapv(f64::from));
            }
            let x = grids_to_tensor(&inputs.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
            let y = grids_to_tensor(&targets.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
            let loss = segmentation_loss(&model.logits(&x)?, &y, config.dice_weight, config.bce_weight)?;
            opt.backward_step(&loss)?;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        }
    }
    Ok(SegTrainOutcome { model, losses })
}

/// Foreground where the probability is at least 0.5.
pub fn threshold(prob: &Array2<f64>) -> Array2<u8> {
    prob.mapv(|p| u8::from(p >= 0.5))
}

pub fn predict(model: &SegModel, image: &Array2<f64>) -> Result<Array2<u8>> {
    let p = model.probabilities(&[image])?;
    Ok(threshold(&p[0]))
}

/// Segmentation metrics of `model` on labelled records.
pub fn evaluate(model: &SegModel, records: &[&SampleRecord]) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(32) {
        let images: Vec<&Array2<f64>> = chunk.iter().map(|r| &r.image).collect();
        let probs = model.probabilities(&images)?;
        for (r, p) in chunk.iter().zip(&probs) {
            rows.push(segmentation_row(&r.case_id, &threshold(p), r.mask_or_err()?, r.spacing)?);
        }
    }
    let spacing = records.first().map(|r| r.spacing);
    let uniform = records.iter().all(|r| Some(r.spacing) == spacing);
    MetricsReport::from_rows(MetricSet::Segmentation, if uniform { spacing } else { None }, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::Vocabulary;
    use crate::datagen::{synth_seg_task, SegTaskSpec};
    use crate::metrics::region_metrics;

    #[test]
    fn tie_is_foreground() {
        let p = Array2::from_shape_vec((1, 3), vec![0.5, 0.4999, 0.9]).unwrap();
        assert_eq!(threshold(&p).into_raw_vec_and_offset().0, vec![1, 0, 1]);
    }

    #[test]
    fn loss_is_small_for_confident_correct_logits() {
        let y = Tensor::from_vec(vec![1f32, 0., 1., 0.], (1, 2, 2, 1), &candle_core::Device::Cpu).unwrap();
        let good = ((&y * 40.0).unwrap() - 20.0).unwrap();
        let bad = good.neg().unwrap();
        let lg = segmentation_loss(&good, &y, 0.5, 0.5).unwrap().to_scalar::<f32>().unwrap();
        let lb = segmentation_loss(&bad, &y, 0.5, 0.5).unwrap().to_scalar::<f32>().unwrap();
        assert!(lg < 0.1 && lb > 5.0, "{lg} {lb}");
    }

    #[test]
    fn single_image_overfit() {
        let spec = SegTaskSpec {
            count: 1,
            ..SegTaskSpec::default()
        };
        let data = synth_seg_task(&spec, &Vocabulary::default(), 11).unwrap();
        let recs: Vec<_> = data.records.iter().collect();
        let cfg = SegTrainConfig {
            epochs: 60,
            learning_rate: 1e-2,
            ..SegTrainConfig::default()
        };
        let backbone = SegBackboneSpec {
            width: 8,
            ..SegBackboneSpec::default()
        };
        let out = train_segmentation(&recs, Augment::none(), &backbone, &cfg, 1).unwrap();
        let pred = predict(&out.model, &recs[0].image).unwrap();
        let dice = region_metrics(&pred, recs[0].mask.as_ref().unwrap()).unwrap().dice;
        assert!(dice >= 0.95, "dice {dice}");
        let again = train_segmentation(&recs, Augment::none(), &backbone, &cfg, 1).unwrap();
        assert_eq!(out.losses, again.losses);
    }
}
