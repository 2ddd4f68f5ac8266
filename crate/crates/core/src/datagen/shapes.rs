//! Signed-distance shapes rasterized with a one-pixel feather.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Blob,
    Ring,
    Polygon,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Blob,
        ShapeFamily::Ring,
        ShapeFamily::Polygon,
    ];
}

#[derive(Debug, Clone)]
pub enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        angle: f64,
    },
    Blob {
        cx: f64,
        cy: f64,
        r: f64,
        // (harmonic, amplitude, phase)
        harmonics: Vec<(f64, f64, f64)>,
    },
    Ring {
        cx: f64,
        cy: f64,
        r: f64,
        thickness: f64,
    },
    Polygon {
        vertices: Vec<(f64, f64)>,
    },
}

impl Shape {
    /// Random shape of the family, centred near `(cx, cy)` with nominal
    /// radius `r` (pixels).
    pub fn random<R: Rng + ?Sized>(family: ShapeFamily, cx: f64, cy: f64, r: f64, rng: &mut R) -> Self {
        match family {
            ShapeFamily::Ellipse => Shape::Ellipse {
                cx,
                cy,
                a: r * rng.random_range(0.8..1.2),
                b: r * rng.random_range(0.55..0.9),
                angle: rng.random_range(0.0..PI),
            },
            ShapeFamily::Blob => Shape::Blob {
                cx,
                cy,
                r,
                harmonics: (2..=4)
                    .map(|k| {
                        (
                            k as f64,
                            rng.random_range(-0.14..0.14),
                            rng.random_range(0.0..2.0 * PI),
                        )
                    })
                    .collect(),
            },
            ShapeFamily::Ring => Shape::Ring {
                cx,
                cy,
                r: r * 1.1,
                thickness: r * rng.random_range(0.35..0.5),
            },
            ShapeFamily::Polygon => {
                let n = rng.random_range(5..=7);
                let start = rng.random_range(0.0..2.0 * PI);
                let vertices = (0..n)
                    .map(|i| {
                        let th = start + 2.0 * PI * (i as f64 + rng.random_range(-0.2..0.2)) / n as f64;
                        let rr = r * rng.random_range(0.85..1.2);
                        (cx + rr * th.cos(), cy + rr * th.sin())
                    })
                    .collect();
                Shape::Polygon { vertices }
            }
        }
    }

    /// Approximate signed distance in pixels, negative inside.
    pub fn sdf(&self, x: f64, y: f64) -> f64 {
        match self {
            Shape::Ellipse { cx, cy, a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let px = c * dx + s * dy;
                let py = -s * dx + c * dy;
                let k0 = ((px / a).powi(2) + (py / b).powi(2)).sqrt();
                let k1 = ((px / (a * a)).powi(2) + (py / (b * b)).powi(2)).sqrt();
                if k1 < 1e-12 {
                    -a.min(*b)
                } else {
                    k0 * (k0 - 1.0) / k1
                }
            }
            Shape::Blob { cx, cy, r, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let th = dy.atan2(dx);
                let scale: f64 = 1.0 + harmonics.iter().map(|(k, a, p)| a * (k * th + p).cos()).sum::<f64>();
                dx.hypot(dy) - r * scale
            }
            Shape::Ring { cx, cy, r, thickness } => {
                let d = (x - cx).hypot(y - cy);
                (d - (r - thickness / 2.0)).abs() - thickness / 2.0
            }
            Shape::Polygon { vertices } => polygon_sdf(vertices, x, y),
        }
    }

    /// Area coverage per pixel (pixel centres at integer + 0.5).
    pub fn coverage(&self, size: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(size, |(yy, xx)| {
            (0.5 - self.sdf(xx as f64 + 0.5, yy as f64 + 0.5)).clamp(0.0, 1.0)
        })
    }
}

fn polygon_sdf(v: &[(f64, f64)], x: f64, y: f64) -> f64 {
    let n = v.len();
    let mut best = f64::INFINITY;
    let mut inside = false;
    for i in 0..n {
        let (ax, ay) = v[i];
        let (bx, by) = v[(i + 1) % n];
        let (ex, ey) = (bx - ax, by - ay);
        let (wx, wy) = (x - ax, y - ay);
        let t = ((wx * ex + wy * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        best = best.min((wx - ex * t).hypot(wy - ey * t));
        if (ay > y) != (by > y) && x < ax + (y - ay) * ex / ey {
            inside = !inside;
        }
    }
    if inside {
        -best
    } else {
        best
    }
}

/// Smooth multiplicative field around 1 with the given amplitude.
pub fn bias_field<R: Rng + ?Sized>(size: (usize, usize), amplitude: f64, rng: &mut R) -> Array2<f64> {
    let (fx, fy) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let (h, w) = size;
    Array2::from_shape_fn(size, |(y, x)| {
        let u = x as f64 / w as f64;
        let v = y as f64 / h as f64;
        1.0 + amplitude * ((2.0 * PI * fx * u + px).sin() * (2.0 * PI * fy * v + py).cos())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sdf_sign_convention() {
        let mut rng = seeded(1);
        for fam in ShapeFamily::ALL {
            let s = Shape::random(fam, 16.0, 16.0, 8.0, &mut rng);
            assert!(s.sdf(0.0, 0.0) > 0.0, "{fam:?} corner should be outside");
        }
        let e = Shape::Ellipse {
            cx: 16.0,
            cy: 16.0,
            a: 6.0,
            b: 4.0,
            angle: 0.0,
        };
        assert!(e.sdf(16.0, 16.0) < 0.0);
        assert!((e.sdf(22.0, 16.0)).abs() < 1e-9);
        let sq = Shape::Polygon {
            vertices: vec![(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)],
        };
        assert!((sq.sdf(2.0, 2.0) + 2.0).abs() < 1e-12);
        assert!((sq.sdf(6.0, 2.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_is_feathered() {
        let e = Shape::Ellipse {
            cx: 16.0,
            cy: 16.0,
            a: 8.0,
            b: 8.0,
            angle: 0.0,
        };
        let c = e.coverage((32, 32));
        assert_eq!(c[[16, 16]], 1.0);
        assert_eq!(c[[0, 0]], 0.0);
        assert!(c.iter().any(|&v| v > 0.0 && v < 1.0));
    }
}
