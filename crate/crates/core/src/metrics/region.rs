use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

pub(crate) fn check_binary(mask: &Array2<u8>, what: &str) -> Result<()> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::Validation(format!("{what} mask is not binary")));
    }
    Ok(())
}

/// Overlap metrics. Empty denominators give 1 when both masks are empty and
/// 0 otherwise.
pub fn region_metrics(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<RegionMetrics> {
    check_shape(gt.shape(), pred.shape())?;
    check_binary(pred, "predicted")?;
    check_binary(gt, "reference")?;
    let (mut tp, mut p, mut g) = (0usize, 0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&a, &b| {
        tp += usize::from(a == 1 && b == 1);
        p += usize::from(a);
        g += usize::from(b);
    });
    let both_empty = p == 0 && g == 0;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            if both_empty {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    Ok(RegionMetrics {
        dice: ratio(2 * tp, p + g),
        precision: ratio(tp, p),
        recall: ratio(tp, g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_block() {
        let gt = Array2::from_shape_fn((8, 8), |(y, x)| u8::from((2..6).contains(&y) && (2..6).contains(&x)));
        let pred = Array2::from_shape_fn((8, 8), |(y, x)| u8::from((2..4).contains(&y) && (2..6).contains(&x)));
        let m = region_metrics(&pred, &gt).unwrap();
        assert!((m.dice - 2.0 * 8.0 / 24.0).abs() < 1e-15);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn conventions() {
        let z = Array2::<u8>::zeros((4, 4));
        let mut a = z.clone();
        a[[0, 0]] = 1;
        let mut b = z.clone();
        b[[3, 3]] = 1;
        assert_eq!(region_metrics(&z, &z).unwrap().dice, 1.0);
        assert_eq!(region_metrics(&z, &z).unwrap().precision, 1.0);
        let d = region_metrics(&a, &b).unwrap();
        assert_eq!((d.dice, d.precision, d.recall), (0.0, 0.0, 0.0));
        assert_eq!(region_metrics(&z, &a).unwrap().precision, 0.0);
        assert_eq!(region_metrics(&a, &a).unwrap().dice, 1.0);
        let mut bad = z.clone();
        bad[[1, 1]] = 2;
        assert!(matches!(region_metrics(&bad, &z), Err(Error::Validation(_))));
    }
}
