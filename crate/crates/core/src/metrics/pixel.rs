use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

pub(crate) fn check_unit_range(img: &Array2<f64>, what: &str) -> Result<()> {
    if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("{what} image has value {v} outside [0, 1]")));
    }
    Ok(())
}

pub fn pixel_metrics(a: &Array2<f64>, b: &Array2<f64>) -> Result<PixelMetrics> {
    check_shape(a.shape(), b.shape())?;
    check_unit_range(a, "first")?;
    check_unit_range(b, "second")?;
    if a.is_empty() {
        return Err(Error::Argument("empty images".into()));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = x - y;
        abs += d.abs();
        sq += d * d;
    });
    let n = a.len() as f64;
    let mse = sq / n;
    Ok(PixelMetrics {
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
    })
}
