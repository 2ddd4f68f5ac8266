//! Deterministic synthetic data: a pretraining corpus of pseudo-modalities,
//! pseudo-organs and pseudo-pathologies, and a small labelled segmentation
//! task drawn from the same generator.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::record::{Dataset, SampleRecord, Split};
use super::shapes::{bias_field, Shape, ShapeFamily};
use crate::conditioning::{edges_from_mask, extract_edges, EdgeConfig, EdgeMap, PromptTriplet, Vocabulary};
use crate::error::{Error, Result};
use crate::imageio::quantize_grid;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Texture {
    Gaussian,
    BiasField,
    Speckle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pathology {
    None,
    Inclusion,
    RimThickening,
}

/// Intensity and noise profile of the `index`-th of `count` modalities.
#[derive(Debug, Clone, Copy)]
struct ModalityProfile {
    background: f64,
    contrast: f64,
    texture: Texture,
}

impl ModalityProfile {
    fn of(index: usize, count: usize) -> Self {
        let frac = if count > 1 {
            index as f64 / (count - 1) as f64
        } else {
            0.5
        };
        Self {
            background: 0.12 + 0.40 * frac,
            contrast: 0.30,
            texture: match index % 3 {
                0 => Texture::Gaussian,
                1 => Texture::BiasField,
                _ => Texture::Speckle,
            },
        }
    }
}

fn pathology_of(index: usize) -> Pathology {
    match index % 3 {
        0 => Pathology::None,
        1 => Pathology::Inclusion,
        _ => Pathology::RimThickening,
    }
}

struct Scene {
    profile: ModalityProfile,
    family: ShapeFamily,
    pathology: Pathology,
    contrast: f64,
    distractors: usize,
    noise_scale: f64,
}

fn render<R: Rng + ?Sized>(scene: &Scene, size: usize, rng: &mut R) -> (Array2<f64>, Array2<u8>) {
    let dims = (size, size);
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let cy = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let r = rng.random_range(0.18..0.30) * s;
    let shape = Shape::random(scene.family, cx, cy, r, rng);
    let organ = shape.coverage(dims);
    let bg = scene.profile.background + rng.random_range(-0.03..0.03);
    let organ_level = (bg + scene.contrast).min(0.95);
    let mut img = organ.mapv(|c| bg + (organ_level - bg) * c);

    match scene.pathology {
        Pathology::None => {}
        Pathology::Inclusion => {
            let inc = Shape::Ellipse {
                cx: cx + rng.random_range(-0.3..0.3) * r,
                cy: cy + rng.random_range(-0.3..0.3) * r,
                a: r * rng.random_range(0.2..0.35),
                b: r * rng.random_range(0.2..0.35),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
            .coverage(dims);
            Zip::from(&mut img)
                .and(&inc)
                .and(&organ)
                .for_each(|v, &i, &o| *v -= 0.22 * i * o);
        }
        Pathology::RimThickening => {
            let width = rng.random_range(1.5..2.5);
            Zip::indexed(&mut img).for_each(|(y, x), v| {
                let d = shape.sdf(x as f64 + 0.5, y as f64 + 0.5);
                let outer = (0.5 - d).clamp(0.0, 1.0);
                let inner = (0.5 - (d + width)).clamp(0.0, 1.0);
                *v += 0.2 * (outer - inner);
            });
        }
    }

    for _ in 0..scene.distractors {
        // small structures outside the labelled organ
        for _attempt in 0..8 {
            let (dx, dy) = (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
            if shape.sdf(dx, dy) < 3.0 {
                continue;
            }
            let d = Shape::Ellipse {
                cx: dx,
                cy: dy,
                a: rng.random_range(1.2..2.5),
                b: rng.random_range(1.2..2.5),
                angle: 0.0,
            }
            .coverage(dims);
            let level = scene.contrast * rng.random_range(0.6..1.0);
            Zip::from(&mut img)
                .and(&d)
                .and(&organ)
                .for_each(|v, &c, &o| *v += level * c * (1.0 - o));
            break;
        }
    }

    let k = scene.noise_scale;
    match scene.profile.texture {
        Texture::Gaussian => img.mapv_inplace(|v| v + k * 0.03 * rng.sample::<f64, _>(StandardNormal)),
        Texture::BiasField => {
            let field = bias_field(dims, k * 0.15, rng);
            Zip::from(&mut img).and(&field).for_each(|v, &f| {
                *v = *v * f + k * 0.015 * rng.sample::<f64, _>(StandardNormal);
            });
        }
        Texture::Speckle => {
            img.mapv_inplace(|v| v * (1.0 + k * 0.18 * rng.sample::<f64, _>(StandardNormal)))
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let mask = organ.mapv(|c| u8::from(c >= 0.5));
    (quantize_grid(&img), mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Pretraining items.
    pub count: usize,
    /// Additional held-out items (split `test`) for generation metrics.
    pub holdout: usize,
    pub size: usize,
    pub edges: EdgeConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            holdout: 64,
            size: 32,
            edges: EdgeConfig::default(),
        }
    }
}

/// Pretraining corpus. Prompts cycle through every modality x organ x
/// category combination, so any corpus at least that large uses the whole
/// vocabulary.
pub fn synth_corpus(spec: &CorpusSpec, vocab: &Vocabulary, seed: u64) -> Result<Dataset> {
    if spec.count == 0 || spec.size < 8 {
        return Err(Error::Argument(format!(
            "corpus needs count >= 1 and size >= 8, got {} and {}",
            spec.count, spec.size
        )));
    }
    let (m, o, c) = (vocab.modality.len(), vocab.organ.len(), vocab.category.len());
    let total = spec.count + spec.holdout;
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = seeded(derive_seed(seed, "corpus-item", i as u64));
        let (mi, oi, ci) = (i % m, (i / m) % o, (i / (m * o)) % c);
        let scene = Scene {
            profile: ModalityProfile::of(mi, m),
            family: ShapeFamily::ALL[oi % ShapeFamily::ALL.len()],
            pathology: pathology_of(ci),
            contrast: ModalityProfile::of(mi, m).contrast + rng.random_range(-0.05..0.05),
            distractors: 0,
            noise_scale: 1.0,
        };
        let (image, _) = render(&scene, spec.size, &mut rng);
        let edge = EdgeMap::new(quantize_grid(extract_edges(&image, &spec.edges)?.values()))?;
        records.push(SampleRecord {
            case_id: format!("corpus-{i:05}"),
            image,
            mask: None,
            triplet: PromptTriplet::new(&vocab.modality[mi], &vocab.organ[oi], &vocab.category[ci]),
            edge,
            split: if i < spec.count { Split::Train } else { Split::Test },
            source_volume_id: None,
            spacing: (1.0, 1.0),
        });
    }
    Dataset::new("synthetic-corpus", Some(seed), serde_json::to_value(spec)?, records, vec![])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTaskSpec {
    pub count: usize,
    pub size: usize,
    pub modality: String,
    pub organ: String,
    /// Categories assigned round-robin.
    pub categories: Vec<String>,
    pub min_foreground: f64,
    pub max_foreground: f64,
    /// Organ-to-background contrast range.
    pub contrast: (f64, f64),
    /// Maximum number of unlabelled distractor structures per image.
    pub max_distractors: usize,
    pub noise_scale: f64,
}

impl Default for SegTaskSpec {
    fn default() -> Self {
        Self {
            count: 32,
            size: 32,
            modality: "MR".into(),
            organ: "Blob".into(),
            categories: vec!["Normal".into(), "Inclusion".into()],
            min_foreground: 0.05,
            max_foreground: 0.40,
            contrast: (0.15, 0.30),
            max_distractors: 2,
            noise_scale: 1.5,
        }
    }
}

/// Small labelled task. Edge maps are the mask boundaries.
pub fn synth_seg_task(spec: &SegTaskSpec, vocab: &Vocabulary, seed: u64) -> Result<Dataset> {
    if spec.count == 0 || spec.size < 8 || spec.categories.is_empty() {
        return Err(Error::Argument("segmentation task needs count, size >= 8 and a category".into()));
    }
    if !(spec.contrast.0 > 0.0 && spec.contrast.0 <= spec.contrast.1) {
        return Err(Error::Argument(format!("bad contrast range {:?}", spec.contrast)));
    }
    let mi = vocab.id(crate::conditioning::Role::Modality, &spec.modality)?;
    let oi = vocab.id(crate::conditioning::Role::Organ, &spec.organ)? - vocab.modality.len();
    let mut cats = Vec::new();
    for c in &spec.categories {
        let id = vocab.id(crate::conditioning::Role::Category, c)?;
        cats.push(id - vocab.modality.len() - vocab.organ.len());
    }
    let pixels = (spec.size * spec.size) as f64;
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = seeded(derive_seed(seed, "task-item", i as u64));
        let ci = cats[i % cats.len()];
        let (image, mask) = loop {
            let scene = Scene {
                profile: ModalityProfile::of(mi, vocab.modality.len()),
                family: ShapeFamily::ALL[oi % ShapeFamily::ALL.len()],
                pathology: pathology_of(ci),
                contrast: rng.random_range(spec.contrast.0..=spec.contrast.1),
                distractors: rng.random_range(0..=spec.max_distractors),
                noise_scale: spec.noise_scale,
            };
            let (img, mask) = render(&scene, spec.size, &mut rng);
            let frac = mask.iter().map(|&v| f64::from(v)).sum::<f64>() / pixels;
            if (spec.min_foreground..=spec.max_foreground).contains(&frac) {
                break (img, mask);
            }
        };
        let edge = edges_from_mask(&mask);
        records.push(SampleRecord {
            case_id: format!("task-{i:04}"),
            image,
            mask: Some(mask),
            triplet: PromptTriplet::new(&spec.modality, &spec.organ, &vocab.category[ci]),
            edge,
            split: Split::Train,
            source_volume_id: None,
            spacing: (1.0, 1.0),
        });
    }
    Dataset::new("synthetic-segmentation", Some(seed), serde_json::to_value(spec)?, records, vec![])
}
