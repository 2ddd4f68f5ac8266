//! Ingestion of external 2D image + mask datasets.
//!
//! Layout:
//!
//! ```text
//! root/
//!   images/<volume>_<slice>.png
//!   masks/<volume>_<slice>.png     same file name as the image
//!   spacing.txt                    optional, `<volume> = <row> <col>` per line
//! ```
//!
//! The volume id is the file stem up to its last underscore (the whole stem
//! when there is none). A `default = <row> <col>` line sets the spacing of
//! volumes not listed; otherwise spacing is one unit per pixel.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::GrayImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::record::{Dataset, SampleRecord, Split};
use crate::conditioning::{edges_from_mask, PromptTriplet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub modality: String,
    pub organ: String,
    pub category: String,
    /// Mask pixel value treated as foreground. `None` accepts a single
    /// nonzero label per mask and rejects masks with several.
    pub foreground_label: Option<u8>,
    /// Resample every slice to `size x size` when set.
    pub size: Option<usize>,
    /// Drop slices whose mask has no foreground.
    pub skip_empty: bool,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            modality: "MR".into(),
            organ: "Blob".into(),
            category: "Normal".into(),
            foreground_label: None,
            size: None,
            skip_empty: true,
        }
    }
}

fn volume_of(stem: &str) -> &str {
    stem.rsplit_once('_').map(|(v, _)| v).unwrap_or(stem)
}

fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn parse_spacing(text: &str) -> std::result::Result<BTreeMap<String, (f64, f64)>, String> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || format!("spacing.txt line {}: expected `<volume> = <row> <col>`", no + 1);
        let (key, value) = line.split_once('=').ok_or_else(bad)?;
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match nums[..] {
            [r, c] if r > 0.0 && c > 0.0 => {
                out.insert(key.trim().to_string(), (r, c));
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

fn load_gray(path: &Path, size: Option<usize>, filter: FilterType) -> std::result::Result<GrayImage, String> {
    let img = image::open(path)
        .map_err(|e| format!("{}: cannot decode ({e})", path.display()))?
        .to_luma8();
    Ok(match size {
        Some(s) if img.dimensions() != (s as u32, s as u32) => imageops::resize(&img, s as u32, s as u32, filter),
        _ => img,
    })
}

fn to_grid(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0])
}

/// Reads `root` per the documented layout. Every problem found is collected
/// and reported together.
pub fn ingest_external(root: &Path, layout: &LayoutConfig) -> Result<Dataset> {
    let images = list_pngs(&root.join("images"))?;
    let masks = list_pngs(&root.join("masks"))?;
    let settings = serde_json::to_value(layout)?;
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".into());
    if images.is_empty() && masks.is_empty() {
        let warning = format!("no image/mask pairs found under {}", root.display());
        return Dataset::new(&name, None, settings, vec![], vec![warning]);
    }

    let mut problems = Vec::new();
    for n in images.keys().filter(|n| !masks.contains_key(*n)) {
        problems.push(format!("image {n} has no mask"));
    }
    for n in masks.keys().filter(|n| !images.contains_key(*n)) {
        problems.push(format!("mask {n} has no image"));
    }

    let spacing_path = root.join("spacing.txt");
    let spacing = if spacing_path.exists() {
        let text = std::fs::read_to_string(&spacing_path).map_err(|e| Error::io(&spacing_path, e))?;
        parse_spacing(&text).unwrap_or_else(|e| {
            problems.push(e);
            BTreeMap::new()
        })
    } else {
        BTreeMap::new()
    };
    let default_spacing = spacing.get("default").copied().unwrap_or((1.0, 1.0));

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut ids = BTreeSet::new();
    for (file, ipath) in &images {
        let Some(mpath) = masks.get(file) else { continue };
        let stem = Path::new(file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = load_gray(ipath, layout.size, FilterType::Triangle);
        let mask = load_gray(mpath, layout.size, FilterType::Nearest);
        let (image, mask) = match (image, mask) {
            (Ok(i), Ok(m)) => (to_grid(&i), to_grid(&m)),
            (i, m) => {
                problems.extend(i.err());
                problems.extend(m.err());
                continue;
            }
        };
        if image.dim() != mask.dim() {
            problems.push(format!("{file}: image {:?} and mask {:?} differ in size", image.dim(), mask.dim()));
            continue;
        }
        let mask = match layout.foreground_label {
            Some(l) => mask.mapv(|v| u8::from(v == l)),
            None => {
                let labels: BTreeSet<u8> = mask.iter().copied().filter(|&v| v != 0).collect();
                if labels.len() > 1 {
                    problems.push(format!("{file}: mask has several labels {labels:?}; set foreground_label"));
                    continue;
                }
                mask.mapv(|v| u8::from(v != 0))
            }
        };
        if layout.skip_empty && mask.iter().all(|&v| v == 0) {
            warnings.push(format!("{file}: empty mask, slice skipped"));
            continue;
        }
        if !ids.insert(stem.clone()) {
            problems.push(format!("{file}: duplicate case id {stem}"));
            continue;
        }
        let volume = volume_of(&stem).to_string();
        let edge = edges_from_mask(&mask);
        records.push(SampleRecord {
            case_id: stem,
            image: image.mapv(|v| f64::from(v) / 255.0),
            mask: Some(mask),
            triplet: PromptTriplet::new(&layout.modality, &layout.organ, &layout.category),
            edge,
            split: Split::Train,
            spacing: spacing.get(&volume).copied().unwrap_or(default_spacing),
            source_volume_id: Some(volume),
        });
    }
    if !problems.is_empty() {
        return Err(Error::Ingestion(problems));
    }
    if records.is_empty() {
        warnings.push("every slice was skipped".into());
    }
    Dataset::new(&name, None, settings, records, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn write(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
    }

    #[test]
    fn empty_directory_warns() {
        let dir = tempfile::tempdir().unwrap();
        let d = ingest_external(dir.path(), &LayoutConfig::default()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.manifest.warnings.len(), 1);
    }

    #[test]
    fn one_pair_with_255_labels() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("images/vol1_003.png"), 8, 8, |x, _| (x * 30) as u8);
        write(&dir.path().join("masks/vol1_003.png"), 8, 8, |x, y| if x > 2 && y > 2 { 255 } else { 0 });
        let d = ingest_external(dir.path(), &LayoutConfig::default()).unwrap();
        assert_eq!(d.len(), 1);
        let r = &d.records[0];
        assert_eq!(r.spacing, (1.0, 1.0));
        assert_eq!(r.source_volume_id.as_deref(), Some("vol1"));
        let m = r.mask.as_ref().unwrap();
        assert!(m.iter().all(|&v| v <= 1));
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 25);
    }

    #[test]
    fn spacing_sidecar_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("images/a_1.png"), 16, 16, |_, _| 100);
        write(&dir.path().join("masks/a_1.png"), 16, 16, |x, _| if x < 8 { 1 } else { 0 });
        std::fs::write(dir.path().join("spacing.txt"), "a = 0.5 0.75\n").unwrap();
        let layout = LayoutConfig {
            size: Some(8),
            ..LayoutConfig::default()
        };
        let d = ingest_external(dir.path(), &layout).unwrap();
        assert_eq!(d.records[0].spacing, (0.5, 0.75));
        assert_eq!(d.records[0].dim(), (8, 8));
    }

    #[test]
    fn problems_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("images/x_1.png"), 4, 4, |_, _| 0);
        write(&dir.path().join("masks/y_1.png"), 4, 4, |_, _| 1);
        write(&dir.path().join("images/z_1.png"), 4, 4, |_, _| 0);
        write(&dir.path().join("masks/z_1.png"), 4, 4, |x, _| x as u8);
        std::fs::write(dir.path().join("images/bad_1.png"), b"not a png").unwrap();
        write(&dir.path().join("masks/bad_1.png"), 4, 4, |_, _| 1);
        match ingest_external(dir.path(), &LayoutConfig::default()) {
            Err(Error::Ingestion(p)) => {
                assert_eq!(p.len(), 4, "{p:?}");
                assert!(p.iter().any(|s| s.contains("x_1.png has no mask")));
                assert!(p.iter().any(|s| s.contains("several labels")));
                assert!(p.iter().any(|s| s.contains("cannot decode")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_slices_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("images/v_1.png"), 4, 4, |_, _| 0);
        write(&dir.path().join("masks/v_1.png"), 4, 4, |_, _| 0);
        let d = ingest_external(dir.path(), &LayoutConfig::default()).unwrap();
        assert!(d.is_empty());
        assert!(!d.manifest.warnings.is_empty());
    }
}
