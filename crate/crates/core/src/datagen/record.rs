use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conditioning::{EdgeMap, PromptTriplet};
use crate::error::{Error, Result};
use crate::imageio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dataset element: image, optional label mask, prompt and edge map.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub case_id: String,
    pub image: Array2<f64>,
    pub mask: Option<Array2<u8>>,
    pub triplet: PromptTriplet,
    pub edge: EdgeMap,
    pub split: Split,
    pub source_volume_id: Option<String>,
    /// Physical size of one pixel along (rows, columns).
    pub spacing: (f64, f64),
}

impl SampleRecord {
    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.image.dim();
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "{}: pixel value {v} outside [0, 1]",
                self.case_id
            )));
        }
        if self.edge.dim() != dim {
            return Err(Error::Validation(format!("{}: edge map shape differs", self.case_id)));
        }
        if let Some(m) = &self.mask {
            if m.dim() != dim {
                return Err(Error::Validation(format!("{}: mask shape differs", self.case_id)));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Validation(format!("{}: mask is not binary", self.case_id)));
            }
        }
        if !(self.spacing.0 > 0.0 && self.spacing.1 > 0.0) {
            return Err(Error::Validation(format!("{}: spacing must be positive", self.case_id)));
        }
        Ok(())
    }

    /// Grouping key for fold assignment: the source volume when known.
    pub fn group_key(&self) -> &str {
        self.source_volume_id.as_deref().unwrap_or(&self.case_id)
    }

    pub fn mask_or_err(&self) -> Result<&Array2<u8>> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{}: record has no mask", self.case_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub case_id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub edge: PathBuf,
    pub triplet: PromptTriplet,
    pub split: Split,
    pub source_volume_id: Option<String>,
    pub spacing: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: Option<u64>,
    /// Generator or layout settings that produced the dataset.
    pub settings: serde_json::Value,
    pub cases: Vec<ManifestCase>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Records plus the manifest describing them. Paths in the manifest are
/// relative to the dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
}

const MANIFEST: &str = "manifest.json";

impl Dataset {
    pub fn new(
        name: &str,
        seed: Option<u64>,
        settings: serde_json::Value,
        records: Vec<SampleRecord>,
        warnings: Vec<String>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.case_id.clone()) {
                return Err(Error::Validation(format!("duplicate case id {}", r.case_id)));
            }
        }
        let cases = records
            .iter()
            .map(|r| ManifestCase {
                case_id: r.case_id.clone(),
                image: PathBuf::from(format!("images/{}.png", r.case_id)),
                mask: r
                    .mask
                    .as_ref()
                    .map(|_| PathBuf::from(format!("masks/{}.png", r.case_id))),
                edge: PathBuf::from(format!("edges/{}.png", r.case_id)),
                triplet: r.triplet.clone(),
                split: r.split,
                source_volume_id: r.source_volume_id.clone(),
                spacing: r.spacing,
            })
            .collect();
        Ok(Self {
            manifest: DatasetManifest {
                name: name.to_string(),
                seed,
                settings,
                cases,
                warnings,
            },
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (r, c) in self.records.iter().zip(&self.manifest.cases) {
            imageio::write_gray(&dir.join(&c.image), &r.image)?;
            if let (Some(m), Some(p)) = (&r.mask, &c.mask) {
                imageio::write_mask(&dir.join(p), m)?;
            }
            imageio::write_gray(&dir.join(&c.edge), r.edge.values())?;
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut records = Vec::with_capacity(manifest.cases.len());
        for c in &manifest.cases {
            let image = imageio::read_gray(&dir.join(&c.image))?;
            let mask = match &c.mask {
                Some(p) => Some(imageio::read_mask(&dir.join(p))?),
                None => None,
            };
            let edge = EdgeMap::new(imageio::read_gray(&dir.join(&c.edge))?)?;
            records.push(SampleRecord {
                case_id: c.case_id.clone(),
                image,
                mask,
                triplet: c.triplet.clone(),
                edge,
                split: c.split,
                source_volume_id: c.source_volume_id.clone(),
                spacing: c.spacing,
            });
        }
        for r in &records {
            r.validate()?;
        }
        Ok(Self { manifest, records })
    }
}
