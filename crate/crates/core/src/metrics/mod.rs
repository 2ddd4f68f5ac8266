//! Generation-quality and segmentation metrics, and their reports.

mod pixel;
mod region;
mod report;
mod structural;
mod surface;

pub use pixel::{pixel_metrics, PixelMetrics};
pub use region::{region_metrics, RegionMetrics};
pub use report::{mean_std, Aggregate, CaseRow, MetricSet, MetricsReport};
pub use structural::{ms_ssim_scales, structural_metrics, StructuralMetrics, MS_SSIM_WEIGHTS, SIGMA, WINDOW};
pub use surface::{distance_transform, percentile, surface_metrics, SurfaceMetrics};

use ndarray::Array2;

use crate::error::Result;

/// Segmentation row for one case: dice, precision, recall, hd95, assd.
pub fn segmentation_row(case_id: &str, pred: &Array2<u8>, gt: &Array2<u8>, spacing: (f64, f64)) -> Result<CaseRow> {
    let r = region_metrics(pred, gt)?;
    let s = surface_metrics(pred, gt, spacing)?;
    Ok(CaseRow {
        case_id: case_id.to_string(),
        values: vec![r.dice, r.precision, r.recall, s.hd95, s.assd],
        warning: s.sentinel.then(|| "empty boundary, diagonal sentinel used".to_string()),
    })
}

/// Generation row for one case: mae, mse, rmse, ssim, ms_ssim.
pub fn generation_row(case_id: &str, generated: &Array2<f64>, original: &Array2<f64>) -> Result<CaseRow> {
    let p = pixel_metrics(generated, original)?;
    let s = structural_metrics(generated, original)?;
    Ok(CaseRow {
        case_id: case_id.to_string(),
        values: vec![p.mae, p.mse, p.rmse, s.ssim, s.ms_ssim],
        warning: None,
    })
}
