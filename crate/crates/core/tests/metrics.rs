use diffboost::metrics::{percentile, pixel_metrics, region_metrics, structural_metrics, surface_metrics};
use diffboost::rng::seeded;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn square(n: usize, y0: usize, x0: usize, side: usize) -> Array2<u8> {
    Array2::from_shape_fn((n, n), |(y, x)| u8::from(y >= y0 && y < y0 + side && x >= x0 && x < x0 + side))
}

#[test]
fn empty_mask_conventions() {
    let empty = Array2::<u8>::zeros((8, 8));
    let sq = square(8, 2, 2, 3);
    let r = region_metrics(&empty, &empty).unwrap();
    assert_eq!((r.dice, r.precision, r.recall), (1.0, 1.0, 1.0));
    let r = region_metrics(&empty, &sq).unwrap();
    assert_eq!((r.dice, r.precision, r.recall), (0.0, 0.0, 0.0));
    let s = surface_metrics(&empty, &sq, (1.0, 1.0)).unwrap();
    assert!(s.sentinel);
    assert!((s.hd95 - 128f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.hd95, s.assd);
}

#[test]
fn shifted_square_distances() {
    let a = square(16, 4, 4, 6);
    let b = square(16, 4, 6, 6);
    let s = surface_metrics(&a, &a, (1.0, 1.0)).unwrap();
    assert_eq!((s.hd95, s.assd), (0.0, 0.0));
    let s = surface_metrics(&a, &b, (1.0, 1.0)).unwrap();
    assert!(!s.sentinel);
    assert!(s.hd95 > 0.0 && s.hd95 <= 2.0);
    let scaled = surface_metrics(&a, &b, (1.0, 0.5)).unwrap();
    assert!(scaled.hd95 <= s.hd95);
}

#[test]
fn non_binary_masks_are_rejected() {
    let mut a = square(8, 1, 1, 3);
    a[[0, 0]] = 2;
    assert!(region_metrics(&a, &a).is_err());
    assert!(surface_metrics(&a, &a, (1.0, 1.0)).is_err());
}

#[test]
fn percentile_interpolates() {
    assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0), 3.0);
    assert!((percentile(&[0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
    assert_eq!(percentile(&[7.0], 95.0), 7.0);
}

#[test]
fn structural_scores_drop_with_noise() {
    let mut rng = seeded(3);
    let x = Array2::from_shape_fn((32, 32), |(y, c)| (y + c) as f64 / 62.0);
    let noisy = x.mapv(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
    let same = structural_metrics(&x, &x).unwrap();
    let other = structural_metrics(&x, &noisy).unwrap();
    assert!((same.ms_ssim - 1.0).abs() < 1e-6);
    assert!(other.ssim < same.ssim && other.ms_ssim < same.ms_ssim);
    assert_eq!(same.scales, 1);
    assert!(structural_metrics(&Array2::zeros((64, 64)), &Array2::zeros((64, 64))).unwrap().scales >= 2);
}

#[test]
fn pixel_metrics_of_identical_images() {
    let x = Array2::from_elem((4, 4), 0.3);
    let p = pixel_metrics(&x, &x).unwrap();
    assert_eq!((p.mae, p.mse, p.rmse), (0.0, 0.0, 0.0));
}

fn mask_strategy() -> impl Strategy<Value = Array2<u8>> {
    proptest::collection::vec(0u8..2, 144).prop_map(|v| Array2::from_shape_vec((12, 12), v).unwrap())
}

proptest! {
    #[test]
    fn region_metrics_are_bounded_and_symmetric(a in mask_strategy(), b in mask_strategy()) {
        let ab = region_metrics(&a, &b).unwrap();
        let ba = region_metrics(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.dice));
        prop_assert_eq!(ab.dice, ba.dice);
        prop_assert_eq!(ab.precision, ba.recall);
    }

    #[test]
    fn surface_metrics_are_symmetric(a in mask_strategy(), b in mask_strategy()) {
        let ab = surface_metrics(&a, &b, (1.0, 1.0)).unwrap();
        let ba = surface_metrics(&b, &a, (1.0, 1.0)).unwrap();
        prop_assert!((ab.hd95 - ba.hd95).abs() < 1e-12);
        prop_assert!((ab.assd - ba.assd).abs() < 1e-12);
        prop_assert!(ab.assd >= 0.0);
    }
}
