//! The cache of diffusion-generated variants per training image.
//!
//! On-disk layout:
//!
//! ```text
//! cache/
//!   manifest.json
//!   <case_id>/original.png
//!   <case_id>/mask.png
//!   <case_id>/variant_00.png ...
//! ```

use std::path::Path;

use candle_core::DType;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conditioning::{edges_from_mask, encode_prompt, PromptTriplet};
use crate::datagen::{SampleRecord, Split};
use crate::denoiser::{generate, Checkpoint, GenerationCondition, TrainingStage};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    /// Variants per training image.
    pub n: usize,
    /// Augmentation texts cycled across the variants of each image.
    pub aug_texts: Vec<String>,
    /// Samples denoised together.
    pub batch_size: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            n: 10,
            aug_texts: vec![
                "enhanced contrast".into(),
                "high resolution".into(),
                "low noise".into(),
                "sharp detail".into(),
            ],
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub image: Array2<f64>,
    pub aug_text: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub original: SampleRecord,
    pub variants: Vec<Variant>,
}

impl CacheEntry {
    /// Variant `i` as a record: generated image, original mask and prompt.
    pub fn variant_record(&self, i: usize) -> SampleRecord {
        let v = &self.variants[i];
        let mut r = self.original.clone();
        r.case_id = format!("{}-v{i:02}", r.case_id);
        r.image = v.image.clone();
        if let Some(text) = &v.aug_text {
            r.triplet = r.triplet.with_aug(text);
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationCache {
    /// Fingerprint of the checkpoint that generated the variants.
    pub checkpoint: String,
    pub seed: u64,
    pub entries: Vec<CacheEntry>,
}

impl AugmentationCache {
    pub fn n(&self) -> usize {
        self.entries.first().map(|e| e.variants.len()).unwrap_or(0)
    }

    pub fn entry(&self, case_id: &str) -> Option<&CacheEntry> {
        self.entries.iter().find(|e| e.original.case_id == case_id)
    }

    /// Checks that every record has an entry with `n` variants of its shape
    /// and with an identical mask.
    pub fn check_covers(&self, records: &[&SampleRecord], n: usize) -> Result<()> {
        for r in records {
            let e = self
                .entry(&r.case_id)
                .ok_or_else(|| Error::Validation(format!("cache has no entry for {}", r.case_id)))?;
            if e.variants.len() < n {
                return Err(Error::Validation(format!(
                    "cache holds {} variants of {}, {n} required",
                    e.variants.len(),
                    r.case_id
                )));
            }
            if e.original.mask != r.mask || e.original.image != r.image {
                return Err(Error::Validation(format!("cache entry {} differs from the dataset", r.case_id)));
            }
            if e.variants.iter().any(|v| v.image.dim() != r.dim()) {
                return Err(Error::Validation(format!("cache variant of {} has the wrong shape", r.case_id)));
            }
        }
        Ok(())
    }

    /// Keeps only the first `n` variants of each entry.
    pub fn truncated(&self, n: usize) -> Self {
        let mut c = self.clone();
        for e in &mut c.entries {
            e.variants.truncate(n);
        }
        c
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut cases = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let r = &e.original;
            let sub = dir.join(&r.case_id);
            imageio::write_gray(&sub.join("original.png"), &r.image)?;
            imageio::write_mask(&sub.join("mask.png"), r.mask_or_err()?)?;
            let mut variants = Vec::with_capacity(e.variants.len());
            for (i, v) in e.variants.iter().enumerate() {
                let file = format!("variant_{i:02}.png");
                imageio::write_gray(&sub.join(&file), &v.image)?;
                variants.push(VariantFile {
                    file,
                    aug_text: v.aug_text.clone(),
                    seed: v.seed,
                });
            }
            cases.push(CaseFile {
                case_id: r.case_id.clone(),
                triplet: r.triplet.clone(),
                split: r.split,
                source_volume_id: r.source_volume_id.clone(),
                spacing: r.spacing,
                variants,
            });
        }
        let manifest = CacheManifest {
            checkpoint: self.checkpoint.clone(),
            seed: self.seed,
            cases,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CacheManifest = serde_json::from_str(&text)?;
        let mut entries = Vec::with_capacity(manifest.cases.len());
        for c in manifest.cases {
            let sub = dir.join(&c.case_id);
            let mask = imageio::read_mask(&sub.join("mask.png"))?;
            let original = SampleRecord {
                case_id: c.case_id,
                image: imageio::read_gray(&sub.join("original.png"))?,
                edge: edges_from_mask(&mask),
                mask: Some(mask),
                triplet: c.triplet,
                split: c.split,
                source_volume_id: c.source_volume_id,
                spacing: c.spacing,
            };
            original.validate()?;
            let mut variants = Vec::with_capacity(c.variants.len());
            for v in c.variants {
                variants.push(Variant {
                    image: imageio::read_gray(&sub.join(&v.file))?,
                    aug_text: v.aug_text,
                    seed: v.seed,
                });
            }
            entries.push(CacheEntry { original, variants });
        }
        Ok(Self {
            checkpoint: manifest.checkpoint,
            seed: manifest.seed,
            entries,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VariantFile {
    file: String,
    aug_text: Option<String>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseFile {
    case_id: String,
    triplet: PromptTriplet,
    split: Split,
    source_volume_id: Option<String>,
    spacing: (f64, f64),
    variants: Vec<VariantFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    checkpoint: String,
    seed: u64,
    cases: Vec<CaseFile>,
}

/// Generates `n` variants of every labelled record, conditioned on the mask
/// boundary and the record's prompt extended by one augmentation text
/// (cycled across variants). Variant `i` of record `k` is seeded from
/// `(seed, k, i)` alone, so a smaller cache is a prefix of a larger one.
pub fn build_augmentation_cache(
    records: &[&SampleRecord],
    ckpt: &Checkpoint,
    config: &CacheConfig,
    seed: u64,
) -> Result<AugmentationCache> {
    if ckpt.stage != TrainingStage::Finetuned {
        return Err(Error::Stage(format!(
            "augmentation needs a finetuned checkpoint, got a {} one",
            ckpt.stage
        )));
    }
    if config.n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    let model = ckpt.instantiate(DType::F32)?;
    let schedule = ckpt.schedule()?;
    let table = model.embedding_table()?;
    let mut conditions = Vec::with_capacity(records.len() * config.n);
    let mut seeds = Vec::with_capacity(records.len() * config.n);
    let mut texts = Vec::with_capacity(records.len() * config.n);
    for (k, r) in records.iter().enumerate() {
        r.validate()?;
        let edge = edges_from_mask(r.mask_or_err()?);
        let case_seed = derive_seed(seed, "cache-case", k as u64);
        for i in 0..config.n {
            let aug = (!config.aug_texts.is_empty()).then(|| config.aug_texts[i % config.aug_texts.len()].clone());
            let triplet = match &aug {
                Some(t) => r.triplet.clone().with_aug(t),
                None => r.triplet.clone(),
            };
            conditions.push(GenerationCondition {
                text: encode_prompt(&triplet, &table)?,
                edge: edge.clone(),
            });
            seeds.push(derive_seed(case_seed, "cache-variant", i as u64));
            texts.push(aug);
        }
    }
    let images = generate(&model, &schedule, &conditions, &seeds, config.batch_size)?;
    let mut images = images.into_iter();
    let mut seeds_it = seeds.into_iter();
    let mut texts_it = texts.into_iter();
    let entries = records
        .iter()
        .map(|r| CacheEntry {
            original: (*r).clone(),
            variants: (0..config.n)
                .map(|_| Variant {
                    image: images.next().unwrap(),
                    aug_text: texts_it.next().unwrap(),
                    seed: seeds_it.next().unwrap(),
                })
                .collect(),
        })
        .collect();
    Ok(AugmentationCache {
        checkpoint: ckpt.fingerprint()?,
        seed,
        entries,
    })
}
