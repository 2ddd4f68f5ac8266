mod common;

use common::{finetuned, task};
use diffboost::augmentation::{build_augmentation_cache, generate_random_patch, mix, AugmentationCache, CacheConfig};
use diffboost::rng::seeded;
use ndarray::Array2;
use proptest::prelude::*;

#[test]
fn cache_is_deterministic_diverse_and_prefix_consistent() {
    let records = task(4, 16, 11);
    let refs: Vec<_> = records.iter().collect();
    let ckpt = finetuned(&records);
    let cfg = CacheConfig { n: 3, batch_size: 8, ..CacheConfig::default() };
    let a = build_augmentation_cache(&refs, &ckpt, &cfg, 5).unwrap();
    let b = build_augmentation_cache(&refs, &ckpt, &cfg, 5).unwrap();
    assert_eq!(a.entries, b.entries);
    a.check_covers(&refs, 3).unwrap();
    assert!(a.check_covers(&refs, 4).is_err());

    let mut pair_mae = 0.0;
    for e in &a.entries {
        let v = &e.variants;
        pair_mae += (&v[0].image - &v[1].image).mapv(f64::abs).mean().unwrap();
        assert_eq!(v[0].aug_text.as_deref(), Some("enhanced contrast"));
        assert_eq!(v[1].aug_text.as_deref(), Some("high resolution"));
    }
    assert!(pair_mae > 0.0);

    let small = build_augmentation_cache(&refs, &ckpt, &CacheConfig { n: 2, ..cfg.clone() }, 5).unwrap();
    assert_eq!(small.entries, a.truncated(2).entries);

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = AugmentationCache::load(dir.path()).unwrap();
    assert_eq!(back.n(), 3);
    assert_eq!(back.checkpoint, a.checkpoint);
    // variants persist as 8-bit images, which the generator already emits
    assert_eq!(back.entries, a.entries);
}

#[test]
fn pretrained_checkpoints_cannot_fill_a_cache() {
    use diffboost::conditioning::Vocabulary;
    use diffboost::denoiser::{train_diffusion, TrainStart, TrainingStage};
    let records = task(2, 16, 12);
    let refs: Vec<_> = records.iter().collect();
    let pre = train_diffusion(&records, &common::short_training(1), TrainingStage::Pretrained, TrainStart::Fresh(&Vocabulary::default()), 1)
        .unwrap();
    assert!(build_augmentation_cache(&refs, &pre.checkpoint, &CacheConfig::default(), 1).is_err());
}

#[test]
fn ragged_grids_are_cropped() {
    let m = generate_random_patch(0.5, 8, (20, 13), &mut seeded(1)).unwrap();
    assert_eq!(m.grid_dims(), (3, 2));
    assert_eq!(m.dim(), (20, 13));
    assert!(generate_random_patch(1.5, 8, (20, 13), &mut seeded(1)).is_err());
    assert!(generate_random_patch(0.5, 0, (20, 13), &mut seeded(1)).is_err());
}

proptest! {
    #[test]
    fn mixing_picks_one_source_per_pixel(alpha in 0.0f64..=1.0, ps in 1usize..12, seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let m = generate_random_patch(alpha, ps, (12, 12), &mut rng).unwrap();
        let x0 = Array2::from_elem((12, 12), 1.0);
        let xi = Array2::from_elem((12, 12), 0.0);
        let out = mix(&x0, &xi, &m).unwrap();
        prop_assert_eq!(out.mapv(|v| v as u8), m.grid().clone());
    }
}
