use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::region::check_binary;
use crate::conditioning::boundary;
use crate::error::{check_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub hd95: f64,
    pub assd: f64,
    /// Set when a mask had no boundary and the diagonal sentinel was used.
    pub sentinel: bool,
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// with sample spacing `step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let w = step * step;
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest set pixel of
/// `sites`, in physical units given `spacing = (row, col)`.
pub fn distance_transform(sites: &Array2<u8>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut g = sites.mapv(|v| if v > 0 { 0.0 } else { FAR });
    let mut col = vec![0.0; h];
    let mut buf = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[[y, x]];
        }
        edt_1d(&col, spacing.0, &mut buf);
        for y in 0..h {
            g[[y, x]] = buf[y];
        }
    }
    let mut row = vec![0.0; w];
    let mut buf = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            row[x] = g[[y, x]];
        }
        edt_1d(&row, spacing.1, &mut buf);
        for x in 0..w {
            g[[y, x]] = if buf[x] >= FAR { f64::INFINITY } else { buf[x].sqrt() };
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn directed(from: &Array2<u8>, to_dt: &Array2<f64>) -> Vec<f64> {
    from.iter()
        .zip(to_dt.iter())
        .filter(|(&b, _)| b == 1)
        .map(|(_, &d)| d)
        .collect()
}

/// HD95 and ASSD between mask boundaries. When either mask has no boundary
/// both values are the image diagonal and `sentinel` is set.
pub fn surface_metrics(pred: &Array2<u8>, gt: &Array2<u8>, spacing: (f64, f64)) -> Result<SurfaceMetrics> {
    check_shape(gt.shape(), pred.shape())?;
    check_binary(pred, "predicted")?;
    check_binary(gt, "reference")?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::Argument(format!("spacing {spacing:?} must be positive")));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    if !bp.iter().any(|&v| v == 1) || !bg.iter().any(|&v| v == 1) {
        let (h, w) = pred.dim();
        let diag = (h as f64 * spacing.0).hypot(w as f64 * spacing.1);
        return Ok(SurfaceMetrics {
            hd95: diag,
            assd: diag,
            sentinel: true,
        });
    }
    let d_pg = directed(&bp, &distance_transform(&bg, spacing));
    let d_gp = directed(&bg, &distance_transform(&bp, spacing));
    let hd95 = percentile(&d_pg, 95.0).max(percentile(&d_gp, 95.0));
    let assd = (d_pg.iter().sum::<f64>() + d_gp.iter().sum::<f64>()) / (d_pg.len() + d_gp.len()) as f64;
    Ok(SurfaceMetrics {
        hd95,
        assd,
        sentinel: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn brute_dt(sites: &Array2<u8>, s: (f64, f64)) -> Array2<f64> {
        let pts: Vec<_> = sites.indexed_iter().filter(|(_, &v)| v > 0).map(|(p, _)| p).collect();
        Array2::from_shape_fn(sites.dim(), |(y, x)| {
            pts.iter()
                .map(|&(py, px)| ((y as f64 - py as f64) * s.0).hypot((x as f64 - px as f64) * s.1))
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = seeded(3);
        for trial in 0..40 {
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let density = [0.02, 0.1, 0.5][trial % 3];
            let sites = Array2::from_shape_simple_fn((h, w), || u8::from(rng.random::<f64>() < density));
            if !sites.iter().any(|&v| v > 0) {
                continue;
            }
            let s = (rng.random_range(0.3..2.0), rng.random_range(0.3..2.0));
            let a = distance_transform(&sites, s);
            let b = brute_dt(&sites, s);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn single_points() {
        let mut a = Array2::<u8>::zeros((9, 9));
        let mut b = a.clone();
        a[[4, 2]] = 1;
        b[[4, 5]] = 1;
        let m = surface_metrics(&a, &b, (1.0, 1.0)).unwrap();
        assert_eq!((m.hd95, m.assd, m.sentinel), (3.0, 3.0, false));
        let same = surface_metrics(&a, &a, (1.0, 1.0)).unwrap();
        assert_eq!((same.hd95, same.assd), (0.0, 0.0));
    }

    #[test]
    fn empty_mask_sentinel() {
        let a = Array2::<u8>::zeros((3, 4));
        let mut b = a.clone();
        b[[1, 1]] = 1;
        let m = surface_metrics(&a, &b, (1.0, 1.0)).unwrap();
        assert!(m.sentinel);
        assert_eq!(m.hd95, 5.0);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
    }
}
