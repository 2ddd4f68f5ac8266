use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Soft or binary edge strengths in `[0, 1]`, paired with an image.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap(Array2<f64>);

impl EdgeMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("edge value {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self(Array2::zeros(shape))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Settings for the gradient-based edge extractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    /// Rescale each map so its strongest response is 1. When false the raw
    /// magnitude is divided by its largest possible value for `[0, 1]` input.
    pub normalize_per_image: bool,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            normalize_per_image: true,
        }
    }
}

/// Pluggable edge extractor so a learned detector can stand in later.
pub trait EdgeExtractor {
    fn extract(&self, image: &Array2<f64>) -> Result<EdgeMap>;
}

impl EdgeExtractor for EdgeConfig {
    fn extract(&self, image: &Array2<f64>) -> Result<EdgeMap> {
        extract_edges(image, self)
    }
}

/// Gradient magnitude at two smoothing scales combined by maximum.
///
/// The fine scale uses plain central differences. The coarse scale smooths
/// across the derivative axis with a `[1, 2, 1]` kernel (Sobel). Both have a
/// one-pixel reach, so responses never leave the band of pixels touching an
/// intensity step. Borders replicate the nearest pixel.
pub fn extract_edges(image: &Array2<f64>, config: &EdgeConfig) -> Result<EdgeMap> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::Argument("empty image".into()));
    }
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        image[[yy, xx]]
    };
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx_fine = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let gy_fine = 0.5 * (at(y + 1, x) - at(y - 1, x));
            let gx_sobel = ((at(y - 1, x + 1) - at(y - 1, x - 1))
                + 2.0 * (at(y, x + 1) - at(y, x - 1))
                + (at(y + 1, x + 1) - at(y + 1, x - 1)))
                / 8.0;
            let gy_sobel = ((at(y + 1, x - 1) - at(y - 1, x - 1))
                + 2.0 * (at(y + 1, x) - at(y - 1, x))
                + (at(y + 1, x + 1) - at(y - 1, x + 1)))
                / 8.0;
            let fine = gx_fine.hypot(gy_fine);
            let coarse = gx_sobel.hypot(gy_sobel);
            out[[y as usize, x as usize]] = fine.max(coarse);
        }
    }
    let scale = if config.normalize_per_image {
        out.iter().cloned().fold(0.0, f64::max)
    } else {
        // both operators peak at 0.5 per axis on [0, 1] data
        std::f64::consts::FRAC_1_SQRT_2
    };
    if scale > 0.0 {
        out.mapv_inplace(|v| (v / scale).clamp(0.0, 1.0));
    }
    Ok(EdgeMap(out))
}

/// Inner boundary of a label mask: a labelled (non-zero) pixel is marked
/// when any existing 4-neighbour carries a different label.
pub fn edges_from_mask(mask: &Array2<u8>) -> EdgeMap {
    EdgeMap(boundary(mask).mapv(f64::from))
}

pub(crate) fn boundary(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = mask[[y, x]];
            if v == 0 {
                continue;
            }
            let differs = (y > 0 && mask[[y - 1, x]] != v)
                || (y + 1 < h && mask[[y + 1, x]] != v)
                || (x > 0 && mask[[y, x - 1]] != v)
                || (x + 1 < w && mask[[y, x + 1]] != v);
            if differs {
                out[[y, x]] = 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(size: usize, lo: usize, hi: usize) -> Array2<f64> {
        Array2::from_shape_fn((size, size), |(y, x)| {
            if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Array2::from_elem((16, 16), 0.4);
        let e = extract_edges(&img, &EdgeConfig::default()).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_edges_stay_in_one_pixel_band() {
        // oracle: a pixel touches the step iff its clipped 3x3 window holds a
        // value different from its own
        let img = square(32, 12, 20);
        let e = extract_edges(&img, &EdgeConfig::default()).unwrap();
        for y in 0..32usize {
            for x in 0..32usize {
                let mut touches = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if (0..32).contains(&yy)
                            && (0..32).contains(&xx)
                            && img[[yy as usize, xx as usize]] != img[[y, x]]
                        {
                            touches = true;
                        }
                    }
                }
                assert_eq!(e.values()[[y, x]] > 0.0, touches, "pixel ({y},{x})");
            }
        }
        let max = e.values().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn mask_edges_examples() {
        let zero = Array2::<u8>::zeros((5, 5));
        assert!(edges_from_mask(&zero).values().iter().all(|&v| v == 0.0));

        let mut single = Array2::<u8>::zeros((5, 5));
        single[[2, 3]] = 1;
        let e = edges_from_mask(&single);
        assert_eq!(e.values().sum(), 1.0);
        assert_eq!(e.values()[[2, 3]], 1.0);

        let mut sq = Array2::<u8>::zeros((7, 7));
        for y in 2..5 {
            for x in 2..5 {
                sq[[y, x]] = 1;
            }
        }
        let e = edges_from_mask(&sq);
        assert_eq!(e.values().sum(), 8.0);
        assert_eq!(e.values()[[3, 3]], 0.0);
    }

    #[test]
    fn full_mask_touching_border_has_no_boundary() {
        let full = Array2::<u8>::ones((4, 4));
        assert_eq!(edges_from_mask(&full).values().sum(), 0.0);
    }
}
