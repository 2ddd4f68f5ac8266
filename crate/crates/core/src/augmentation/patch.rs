use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{check_shape, Error, Result};

/// Binary mixing mask: 1 keeps the real image, 0 takes the generated one.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    grid: Array2<u8>,
    alpha: f64,
    patch_size: usize,
    grid_dims: (usize, usize),
}

impl PatchMask {
    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Number of patch cells along (rows, columns).
    pub fn grid_dims(&self) -> (usize, usize) {
        self.grid_dims
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn ones_fraction(&self) -> f64 {
        self.grid.iter().filter(|&&v| v == 1).count() as f64 / self.grid.len() as f64
    }

    pub fn all(shape: (usize, usize), value: bool) -> Self {
        Self {
            grid: Array2::from_elem(shape, u8::from(value)),
            alpha: if value { 1.0 } else { 0.0 },
            patch_size: shape.0.max(shape.1).max(1),
            grid_dims: (1, 1),
        }
    }
}

/// Draws one uniform value per `patch_size` cell, marks cells whose value is
/// below `alpha`, and expands the cell grid to `shape`. Partial cells at the
/// bottom/right edges are cropped.
pub fn generate_random_patch<R: Rng + ?Sized>(
    alpha: f64,
    patch_size: usize,
    shape: (usize, usize),
    rng: &mut R,
) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    if patch_size == 0 || patch_size > shape.0.max(shape.1) {
        return Err(Error::Argument(format!(
            "patch size {patch_size} must lie in [1, {}]",
            shape.0.max(shape.1)
        )));
    }
    let grid_dims = (shape.0.div_ceil(patch_size), shape.1.div_ceil(patch_size));
    let cells = Array2::from_shape_simple_fn(grid_dims, || u8::from(rng.random::<f64>() < alpha));
    let grid = Array2::from_shape_fn(shape, |(y, x)| cells[[y / patch_size, x / patch_size]]);
    Ok(PatchMask {
        grid,
        alpha,
        patch_size,
        grid_dims,
    })
}

/// `m * x0 + (1 - m) * xi`.
pub fn mix(x0: &Array2<f64>, xi: &Array2<f64>, mask: &PatchMask) -> Result<Array2<f64>> {
    check_shape(x0.shape(), xi.shape())?;
    check_shape(x0.shape(), mask.grid.shape())?;
    let mut out = Array2::zeros(x0.dim());
    Zip::from(&mut out)
        .and(x0)
        .and(xi)
        .and(&mask.grid)
        .for_each(|o, &a, &b, &m| *o = if m == 1 { a } else { b });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn six_by_six_grid() {
        let m = generate_random_patch(0.5, 64, (384, 384), &mut seeded(1)).unwrap();
        assert_eq!(m.grid_dims(), (6, 6));
    }

    #[test]
    fn extremes() {
        let mut rng = seeded(2);
        let ones = generate_random_patch(1.0, 4, (10, 13), &mut rng).unwrap();
        assert!(ones.grid().iter().all(|&v| v == 1));
        let zeros = generate_random_patch(0.0, 4, (10, 13), &mut rng).unwrap();
        assert!(zeros.grid().iter().all(|&v| v == 0));
        assert_eq!(zeros.grid_dims(), (3, 4));
    }

    #[test]
    fn bad_arguments() {
        let mut rng = seeded(2);
        assert!(generate_random_patch(0.5, 0, (8, 8), &mut rng).is_err());
        assert!(generate_random_patch(0.5, 9, (8, 8), &mut rng).is_err());
        assert!(generate_random_patch(1.5, 2, (8, 8), &mut rng).is_err());
        let m = PatchMask::all((4, 4), true);
        assert!(mix(&Array2::zeros((4, 4)), &Array2::zeros((4, 5)), &m).is_err());
    }

    #[test]
    fn checkerboard_selects_whole_patches() {
        let x0 = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f64);
        let xi = x0.mapv(|v| -v);
        let grid = Array2::from_shape_fn((8, 8), |(y, x)| u8::from((y / 4 + x / 4) % 2 == 0));
        let mask = PatchMask {
            grid,
            alpha: 0.5,
            patch_size: 4,
            grid_dims: (2, 2),
        };
        let out = mix(&x0, &xi, &mask).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if (y / 4 + x / 4) % 2 == 0 { x0[[y, x]] } else { xi[[y, x]] };
                assert_eq!(out[[y, x]], expect);
            }
        }
    }

    proptest! {
        #[test]
        fn cells_constant_and_mix_convex(
            seed in 0u64..1000,
            alpha in 0.0f64..=1.0,
            ps in 1usize..12,
            h in 12usize..30,
            w in 12usize..30,
        ) {
            let mut rng = seeded(seed);
            let m = generate_random_patch(alpha, ps, (h, w), &mut rng).unwrap();
            prop_assert_eq!(m.dim(), (h, w));
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(m.grid()[[y, x]], m.grid()[[y - y % ps, x - x % ps]]);
                }
            }
            let a = crate::rng::standard_normal_grid(&mut rng, (h, w));
            let b = crate::rng::standard_normal_grid(&mut rng, (h, w));
            let out = mix(&a, &b, &m).unwrap();
            for ((o, x), y) in out.iter().zip(&a).zip(&b) {
                prop_assert!(*o >= x.min(*y) && *o <= x.max(*y));
            }
            prop_assert_eq!(mix(&a, &a, &m).unwrap(), a);
        }
    }
}
