//! 8-bit grayscale PNG persistence. Intensities in `[0, 1]` are stored as
//! `round(255 v)`, so any grid already on the `k / 255` lattice round-trips
//! exactly.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

pub fn quantize(v: f64) -> f64 {
    f64::from(to_u8(v)) / 255.0
}

pub fn quantize_grid(grid: &Array2<f64>) -> Array2<f64> {
    grid.mapv(quantize)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_gray(path: &Path, grid: &Array2<f64>) -> Result<()> {
    let (h, w) = grid.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(grid[[y as usize, x as usize]])]));
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Binary masks are written as 0 / 255 so they are viewable.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Raw 8-bit values of any decodable image, converted to luma.
pub fn read_luma8(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32)[0]
    }))
}

pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    Ok(read_luma8(path)?.mapv(|v| f64::from(v) / 255.0))
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    Ok(read_luma8(path)?.mapv(|v| u8::from(v > 0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_values_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let g = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) * 9 % 256) as f64 / 255.0);
        write_gray(&p, &g).unwrap();
        assert_eq!(read_gray(&p).unwrap(), g);
        let m = g.mapv(|v| u8::from(v > 0.5));
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }
}
