//! Patch-level mixing of real and generated images, the generated-variant
//! cache, and classical augmentation baselines.

mod cache;
mod classic;
mod patch;

pub use cache::{build_augmentation_cache, AugmentationCache, CacheConfig, CacheEntry, Variant};
pub use classic::{
    apply_classic, apply_transform, Axis, ClassicKind, ClassicRanges, ClassicTransformSpec, Transform,
};
pub use patch::{generate_random_patch, mix, PatchMask};
