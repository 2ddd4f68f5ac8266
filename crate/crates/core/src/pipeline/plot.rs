//! Static SVG charts.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

fn value_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - pad, hi + pad)
}

/// Bars with symmetric error whiskers, one per label.
pub fn bar_chart(path: &Path, title: &str, y_desc: &str, bars: &[(String, f64, f64)]) -> Result<()> {
    let err = draw_err(path);
    let root = SVGBackend::new(path, (160 + 90 * bars.len() as u32, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let (lo, hi) = value_range(bars.iter().flat_map(|b| [b.1 - b.2, b.1 + b.2]));
    let n = bars.len();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, lo.min(0.0)..hi)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < n {
                bars[i as usize].0.clone()
            } else {
                String::new()
            }
        })
        .y_desc(y_desc)
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            let x = i as f64;
            Rectangle::new([(x - 0.3, 0.0), (x + 0.3, b.1)], BLUE.mix(0.6).filled())
        }))
        .map_err(&err)?;
    for (i, b) in bars.iter().enumerate() {
        let x = i as f64;
        chart
            .draw_series(LineSeries::new([(x, b.1 - b.2), (x, b.1 + b.2)], BLACK.stroke_width(1)))
            .map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

/// One line per series over categorical x positions.
pub fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> Result<()> {
    let err = draw_err(path);
    let root = SVGBackend::new(path, (560, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let n = labels.len();
    let (lo, hi) = value_range(series.iter().flat_map(|s| s.1.iter().copied()));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, lo..hi)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < n {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(&err)?;
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(&err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(&err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}
