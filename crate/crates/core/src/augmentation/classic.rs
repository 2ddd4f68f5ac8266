//! Classical augmentation baselines.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::edges_from_mask;
use crate::datagen::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassicKind {
    Contrast,
    Gamma,
    Brightness,
    Noise,
    Resolution,
    Mirror,
    Rotate,
    Scale,
    DeepStack,
}

impl ClassicKind {
    pub const ALL: [ClassicKind; 9] = [
        ClassicKind::Contrast,
        ClassicKind::Gamma,
        ClassicKind::Brightness,
        ClassicKind::Noise,
        ClassicKind::Resolution,
        ClassicKind::Mirror,
        ClassicKind::Rotate,
        ClassicKind::Scale,
        ClassicKind::DeepStack,
    ];

    /// Order in which deep-stack applies the individual transforms.
    pub const STACK_ORDER: [ClassicKind; 8] = [
        ClassicKind::Mirror,
        ClassicKind::Rotate,
        ClassicKind::Scale,
        ClassicKind::Resolution,
        ClassicKind::Contrast,
        ClassicKind::Brightness,
        ClassicKind::Gamma,
        ClassicKind::Noise,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassicKind::Contrast => "contrast",
            ClassicKind::Gamma => "gamma",
            ClassicKind::Brightness => "brightness",
            ClassicKind::Noise => "noise",
            ClassicKind::Resolution => "resolution",
            ClassicKind::Mirror => "mirror",
            ClassicKind::Rotate => "rotate",
            ClassicKind::Scale => "scale",
            ClassicKind::DeepStack => "deep-stack",
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(
            self,
            ClassicKind::Mirror | ClassicKind::Rotate | ClassicKind::Scale | ClassicKind::Resolution
        )
    }
}

impl fmt::Display for ClassicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassicKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown classic transform {s:?}")))
    }
}

/// Parameter ranges of every transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicRanges {
    /// Maximum rotation in degrees, either direction.
    pub rotate_degrees: f64,
    pub scale: (f64, f64),
    /// Relative contrast change, either direction.
    pub contrast: f64,
    /// Additive brightness shift, either direction.
    pub brightness: f64,
    pub gamma: (f64, f64),
    pub noise_sigma: f64,
    /// Down-sampling factor before resampling back up.
    pub resolution: (f64, f64),
    /// Per-transform probability inside deep-stack.
    pub stack_probability: f64,
}

impl Default for ClassicRanges {
    fn default() -> Self {
        Self {
            rotate_degrees: 15.0,
            scale: (0.85, 1.15),
            contrast: 0.2,
            brightness: 0.2,
            gamma: (0.7, 1.5),
            noise_sigma: 0.05,
            resolution: (0.5, 1.0),
            stack_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicTransformSpec {
    pub kind: ClassicKind,
    #[serde(default)]
    pub ranges: ClassicRanges,
}

impl ClassicTransformSpec {
    pub fn new(kind: ClassicKind) -> Self {
        Self {
            kind,
            ranges: ClassicRanges::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Columns,
}

/// One concrete transform with its parameters already drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Contrast(f64),
    Gamma(f64),
    Brightness(f64),
    /// Noise is drawn at application time with this standard deviation.
    Noise(f64),
    Resolution(f64),
    Mirror(Axis),
    Rotate(f64),
    Scale(f64),
}

impl Transform {
    fn draw<R: Rng + ?Sized>(kind: ClassicKind, r: &ClassicRanges, rng: &mut R) -> Option<Self> {
        let sym = |rng: &mut R, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let range = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Some(match kind {
            ClassicKind::Contrast => Transform::Contrast(1.0 + sym(rng, r.contrast)),
            ClassicKind::Gamma => Transform::Gamma(range(rng, r.gamma)),
            ClassicKind::Brightness => Transform::Brightness(sym(rng, r.brightness)),
            ClassicKind::Noise => Transform::Noise(range(rng, (0.0, r.noise_sigma))),
            ClassicKind::Resolution => Transform::Resolution(range(rng, r.resolution)),
            ClassicKind::Mirror => Transform::Mirror(if rng.random::<bool>() { Axis::Rows } else { Axis::Columns }),
            ClassicKind::Rotate => Transform::Rotate(sym(rng, r.rotate_degrees)),
            ClassicKind::Scale => Transform::Scale(range(rng, r.scale)),
            ClassicKind::DeepStack => return None,
        })
    }
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples through an inverse map from output pixel centre to source
/// coordinates. Images interpolate bilinearly with replicated borders; masks
/// take the nearest pixel and are background outside the source.
fn warp(record: &mut SampleRecord, map: impl Fn(f64, f64) -> (f64, f64)) {
    let (h, w) = record.dim();
    let src = record.image.clone();
    record.image = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = map(y as f64 + 0.5, x as f64 + 0.5);
        bilinear(&src, sy - 0.5, sx - 0.5)
    });
    if let Some(mask) = &record.mask {
        let src = mask.clone();
        record.mask = Some(Array2::from_shape_fn((h, w), |(y, x)| {
            let (sy, sx) = map(y as f64 + 0.5, x as f64 + 0.5);
            let (yi, xi) = (sy.floor(), sx.floor());
            if yi < 0.0 || xi < 0.0 || yi >= h as f64 || xi >= w as f64 {
                0
            } else {
                src[[yi as usize, xi as usize]]
            }
        }));
    }
}

fn resize_bilinear(img: &Array2<f64>, (oh, ow): (usize, usize)) -> Array2<f64> {
    let (h, w) = img.dim();
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        bilinear(img, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5)
    })
}

/// Applies a concrete transform in place.
pub fn apply_transform<R: Rng + ?Sized>(record: &mut SampleRecord, t: Transform, rng: &mut R) {
    let (h, w) = record.dim();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    match t {
        Transform::Contrast(f) => {
            let mean = record.image.mean().unwrap_or(0.0);
            record.image.mapv_inplace(|v| mean + f * (v - mean));
        }
        Transform::Gamma(g) => {
            if g != 1.0 {
                record.image.mapv_inplace(|v| v.powf(g));
            }
        }
        Transform::Brightness(b) => record.image.mapv_inplace(|v| v + b),
        Transform::Noise(s) => record
            .image
            .mapv_inplace(|v| v + s * rng.sample::<f64, _>(StandardNormal)),
        Transform::Resolution(f) => {
            if f < 1.0 {
                let small = (((h as f64) * f).round().max(1.0) as usize, ((w as f64) * f).round().max(1.0) as usize);
                let down = resize_bilinear(&record.image, small);
                record.image = resize_bilinear(&down, (h, w));
            }
        }
        Transform::Mirror(axis) => {
            let ax = match axis {
                Axis::Rows => ndarray::Axis(0),
                Axis::Columns => ndarray::Axis(1),
            };
            record.image.invert_axis(ax);
            if let Some(m) = &mut record.mask {
                m.invert_axis(ax);
            }
        }
        Transform::Rotate(deg) => {
            if deg != 0.0 {
                let (s, c) = deg.to_radians().sin_cos();
                warp(record, |y, x| {
                    let (dy, dx) = (y - cy, x - cx);
                    (cy - s * dx + c * dy, cx + c * dx + s * dy)
                });
            }
        }
        Transform::Scale(f) => {
            if f != 1.0 {
                warp(record, |y, x| (cy + (y - cy) / f, cx + (x - cx) / f));
            }
        }
    }
    record.image.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Draws and applies the transform described by `spec`. Deep-stack walks
/// [`ClassicKind::STACK_ORDER`], applying each kind with the configured
/// probability. Edge maps of labelled records are recomputed from the mask.
pub fn apply_classic<R: Rng + ?Sized>(
    record: &SampleRecord,
    spec: &ClassicTransformSpec,
    rng: &mut R,
) -> Result<SampleRecord> {
    record.validate()?;
    let mut out = record.clone();
    let mut spatial = false;
    if spec.kind == ClassicKind::DeepStack {
        for kind in ClassicKind::STACK_ORDER {
            if rng.random::<f64>() < spec.ranges.stack_probability {
                let t = Transform::draw(kind, &spec.ranges, rng).expect("stack kinds are concrete");
                apply_transform(&mut out, t, rng);
                spatial |= kind.is_spatial();
            }
        }
    } else {
        let t = Transform::draw(spec.kind, &spec.ranges, rng).expect("non-stack kinds are concrete");
        apply_transform(&mut out, t, rng);
        spatial = spec.kind.is_spatial();
    }
    if spatial {
        if let Some(m) = &out.mask {
            out.edge = edges_from_mask(m);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_seg_task, SegTaskSpec};
    use crate::conditioning::Vocabulary;
    use crate::rng::seeded;

    fn record() -> SampleRecord {
        let spec = SegTaskSpec {
            count: 1,
            ..SegTaskSpec::default()
        };
        synth_seg_task(&spec, &Vocabulary::default(), 3).unwrap().records.remove(0)
    }

    #[test]
    fn identities() {
        let r = record();
        let mut rng = seeded(0);
        for axis in [Axis::Rows, Axis::Columns] {
            let mut x = r.clone();
            apply_transform(&mut x, Transform::Mirror(axis), &mut rng);
            assert_ne!(x.image, r.image);
            apply_transform(&mut x, Transform::Mirror(axis), &mut rng);
            assert_eq!(x, r);
        }
        for t in [Transform::Rotate(0.0), Transform::Gamma(1.0), Transform::Scale(1.0), Transform::Resolution(1.0)] {
            let mut x = r.clone();
            apply_transform(&mut x, t, &mut rng);
            assert_eq!(x, r, "{t:?}");
        }
    }

    #[test]
    fn masks_stay_binary_and_move_with_image() {
        let r = record();
        let mut rng = seeded(5);
        for kind in ClassicKind::ALL {
            for _ in 0..5 {
                let out = apply_classic(&r, &ClassicTransformSpec::new(kind), &mut rng).unwrap();
                out.validate().unwrap();
                let m = out.mask.as_ref().unwrap();
                assert!(m.iter().all(|&v| v <= 1));
                if !kind.is_spatial() && kind != ClassicKind::DeepStack {
                    assert_eq!(m, r.mask.as_ref().unwrap());
                }
            }
        }
    }

    #[test]
    fn rotation_by_quarter_turn_on_square() {
        let mut r = record();
        r.image = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64 / 15.0);
        r.mask = Some(Array2::from_shape_fn((4, 4), |(y, _)| u8::from(y == 0)));
        r.edge = edges_from_mask(r.mask.as_ref().unwrap());
        apply_transform(&mut r, Transform::Rotate(90.0), &mut seeded(0));
        let m = r.mask.unwrap();
        let ones: Vec<_> = m.indexed_iter().filter(|(_, &v)| v == 1).map(|(p, _)| p).collect();
        assert_eq!(ones.len(), 4);
        assert!(ones.iter().all(|&(_, x)| x == ones[0].1), "{ones:?}");
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("sharpen".parse::<ClassicKind>(), Err(Error::InvalidConfig(_))));
        assert_eq!("deep-stack".parse::<ClassicKind>().unwrap(), ClassicKind::DeepStack);
    }
}
