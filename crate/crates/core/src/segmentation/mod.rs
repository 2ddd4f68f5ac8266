//! Segmentation backbones, the mixed real/generated training loop and
//! cross-validated evaluation.

mod backbone;
mod cv;
mod train;

pub use backbone::{BackboneKind, SegBackboneSpec, SegModel, MAX_PARAMETERS, SEGMENTATION_KIND};
pub use cv::{cross_validate, fold_partition, train_folds, CrossValidation, FoldResult, TrainedFold};
pub use train::{
    evaluate, predict, segmentation_loss, threshold, train_segmentation, Augment, SegTrainConfig, SegTrainOutcome,
};
