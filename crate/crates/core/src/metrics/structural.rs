use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::pixel::check_unit_range;
use crate::error::{check_shape, Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralMetrics {
    pub ssim: f64,
    pub ms_ssim: f64,
    /// Scales actually used by MS-SSIM.
    pub scales: usize,
}

fn gaussian_1d() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter, valid region only.
fn filter(img: &Array2<f64>, k: &[f64; WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, x)| (0..WINDOW).map(|i| k[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..WINDOW).map(|i| k[i] * rows[[y + i, x]]).sum())
}

/// Mean SSIM and mean contrast-structure term over the valid windows.
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>) -> (f64, f64) {
    let k = gaussian_1d();
    let mu_a = filter(a, &k);
    let mu_b = filter(b, &k);
    let aa = filter(&(a * a), &k);
    let bb = filter(&(b * b), &k);
    let ab = filter(&(a * b), &k);
    let n = mu_a.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (ssim_sum / n, cs_sum / n)
}

fn half(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        img.slice(s![2 * y..2 * y + 2, 2 * x..2 * x + 2]).sum() / 4.0
    })
}

/// Number of MS-SSIM scales usable at this size: coarsest scales are dropped
/// until the smallest side is at least twice the window.
pub fn ms_ssim_scales(shape: (usize, usize)) -> usize {
    let mut side = shape.0.min(shape.1);
    let mut scales = 0;
    while scales < MS_SSIM_WEIGHTS.len() && side >= 2 * WINDOW {
        scales += 1;
        side /= 2;
    }
    scales.max(1)
}

/// SSIM (11x11 Gaussian window, sigma 1.5, unit data range) and MS-SSIM.
pub fn structural_metrics(a: &Array2<f64>, b: &Array2<f64>) -> Result<StructuralMetrics> {
    check_shape(a.shape(), b.shape())?;
    check_unit_range(a, "first")?;
    check_unit_range(b, "second")?;
    let (h, w) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(Error::Argument(format!("images of {h}x{w} are smaller than the {WINDOW}x{WINDOW} window")));
    }
    let (ssim, _) = ssim_terms(a, b);
    let scales = ms_ssim_scales((h, w));
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut ms = 1.0;
    for (j, weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let wj = weight / total;
        let (full, cs) = ssim_terms(&x, &y);
        let term = if j + 1 == scales { full } else { cs };
        ms *= term.max(0.0).powf(wj);
        if j + 1 < scales {
            x = half(&x);
            y = half(&y);
        }
    }
    Ok(StructuralMetrics { ssim, ms_ssim: ms, scales })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((n, n), || rng.random::<f64>())
    }

    #[test]
    fn identical_images() {
        let a = random(1, 32);
        let m = structural_metrics(&a, &a).unwrap();
        assert!((m.ssim - 1.0).abs() < 1e-6);
        assert!((m.ms_ssim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_images_closed_form() {
        let a = Array2::zeros((16, 16));
        let b = Array2::ones((16, 16));
        let m = structural_metrics(&a, &b).unwrap();
        assert!((m.ssim - C1 / (1.0 + C1)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_scale_rule() {
        let a = random(2, 64);
        let b = random(3, 64);
        let ab = structural_metrics(&a, &b).unwrap();
        let ba = structural_metrics(&b, &a).unwrap();
        assert!((ab.ssim - ba.ssim).abs() < 1e-12);
        assert!((ab.ms_ssim - ba.ms_ssim).abs() < 1e-12);
        assert_eq!(ms_ssim_scales((64, 64)), 2);
        assert_eq!(ms_ssim_scales((32, 32)), 1);
        assert_eq!(ms_ssim_scales((384, 384)), 5);
        assert!(structural_metrics(&random(1, 8), &random(2, 8)).is_err());
    }
}
