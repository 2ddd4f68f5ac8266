use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, Stage};
use super::plot::line_chart;
use super::run::{load_stage_checkpoint, load_task, repeat_seed, run_pipeline, stage_hash, uniform_spacing, RunLayout};
use crate::augmentation::{build_augmentation_cache, AugmentationCache, CacheConfig};
use crate::datagen::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{MetricSet, MetricsReport};
use crate::rng::derive_seed;
use crate::segmentation::{evaluate, train_folds, Augment, BackboneKind, SegBackboneSpec, SegTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    N,
    Alpha,
    PatchSize,
    Backbone,
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::N => "n",
            SweepParam::Alpha => "alpha",
            SweepParam::PatchSize => "patch_size",
            SweepParam::Backbone => "backbone",
        }
    }

    pub fn default_values(&self) -> Vec<String> {
        match self {
            SweepParam::N => ["1", "2", "5", "10", "20"].map(String::from).to_vec(),
            SweepParam::Alpha => (0..=10).map(|i| format!("{:.1}", i as f64 / 10.0)).collect(),
            SweepParam::PatchSize => ["1", "8", "32", "image-size"].map(String::from).to_vec(),
            SweepParam::Backbone => BackboneKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepParam::N),
            "alpha" => Ok(SweepParam::Alpha),
            "patch_size" | "patch-size" => Ok(SweepParam::PatchSize),
            "backbone" => Ok(SweepParam::Backbone),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep parameter {other:?}: use n, alpha, patch_size or backbone"
            ))),
        }
    }
}

/// Settings of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct Point {
    backbone: SegBackboneSpec,
    train: SegTrainConfig,
}

fn point_for(param: SweepParam, value: &str, config: &RunConfig, side: usize) -> Result<Point> {
    let mut p = Point {
        backbone: config.segmentation.backbone,
        train: config.segmentation.train.clone(),
    };
    let bad = |what: &str| Error::InvalidConfig(format!("{param} value {value:?} is not {what}"));
    match param {
        SweepParam::N => p.train.n = value.parse().map_err(|_| bad("a count"))?,
        SweepParam::Alpha => p.train.alpha = value.parse().map_err(|_| bad("a number"))?,
        SweepParam::PatchSize => {
            p.train.patch_size = Some(match value {
                "image-size" | "image" => side,
                v => v.parse().map_err(|_| bad("a size or image-size"))?,
            })
        }
        SweepParam::Backbone => p.backbone.kind = value.parse()?,
    }
    p.train.validate()?;
    p.backbone.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub cases: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd95_mean: f64,
    pub assd_mean: f64,
    /// Part of the region where gains are expected to level off.
    pub plateau: bool,
    /// Directory holding the per-case table, relative to the sweep directory.
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub param: SweepParam,
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
}

impl AblationTable {
    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// The per-case table behind a row.
    pub fn cases(&self, row: &SweepRow) -> Result<MetricsReport> {
        MetricsReport::load(&self.dir.join(&row.dir), "cases")
    }
}

fn slug(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn hash_of(doc: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// A cache with at least `n` variants: the run's own when large enough,
/// otherwise a larger one generated once under the ablation directory with
/// the same seeds, so its first variants equal the run's.
fn cache_with(config: &RunConfig, layout: &RunLayout, n: usize) -> Result<AugmentationCache> {
    let cache = AugmentationCache::load(&layout.cache())?;
    if cache.n() >= n {
        return Ok(cache);
    }
    let dir = layout.ablation().join(format!("cache-n{n}"));
    if dir.join("manifest.json").exists() {
        let big = AugmentationCache::load(&dir)?;
        if big.checkpoint == cache.checkpoint && big.seed == cache.seed && big.n() >= n {
            return Ok(big);
        }
    }
    let ckpt = load_stage_checkpoint(layout, Stage::Finetune)?;
    let task = load_task(layout)?;
    let cfg = CacheConfig {
        n,
        ..config.cache.clone()
    };
    let big = build_augmentation_cache(&task.split(Split::Train), &ckpt, &cfg, derive_seed(config.seed, "cache", 0))?;
    big.save(&dir)?;
    Ok(big)
}

fn run_point(config: &RunConfig, records: &[&SampleRecord], cache: &AugmentationCache, point: &Point) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for repeat in 0..config.segmentation.seeds {
        let folds = train_folds(
            records,
            Augment::diffboost(cache),
            &point.backbone,
            &point.train,
            repeat_seed(config.seed, repeat),
        )?;
        for t in folds {
            let val: Vec<&SampleRecord> = t.val.iter().map(|&i| records[i]).collect();
            let report = evaluate(&t.outcome.model, &val)?;
            rows.extend(report.rows.into_iter().map(|mut r| {
                r.case_id = format!("r{repeat}/{}", r.case_id);
                r
            }));
        }
    }
    MetricsReport::from_rows(MetricSet::Segmentation, uniform_spacing(records), rows)
}

/// Sweeps one augmentation or backbone setting with DiffBoost training.
/// Data, generator and cache are shared by every point (and taken from the
/// run directory when already present); each point is cross-validated over
/// all repetitions. Writes `ablation/<param>/sweep.csv`, `sweep.svg` and one
/// per-case table per value. Points already computed for the same settings
/// are reused.
pub fn run_ablation(config: &RunConfig, param: &str, values: &[String]) -> Result<AblationTable> {
    let param: SweepParam = param.parse()?;
    config.validate()?;
    let values = if values.is_empty() {
        param.default_values()
    } else {
        values.to_vec()
    };
    let side = config.data.task.size;
    let points = values
        .iter()
        .map(|v| point_for(param, v, config, side))
        .collect::<Result<Vec<_>>>()?;

    let upstream = RunConfig {
        stages: vec![Stage::Data, Stage::Pretrain, Stage::Finetune, Stage::Generate],
        resume: true,
        ..config.clone()
    };
    run_pipeline(&upstream)?;
    let layout = RunLayout::new(&config.run_dir);
    let task = load_task(&layout)?;
    let records = task.split(Split::Train);
    let need = points.iter().map(|p| p.train.n).max().unwrap_or(1);
    let cache = cache_with(config, &layout, need)?;
    let gen_hash = stage_hash(config, Stage::Generate)?;

    let dir = layout.ablation().join(param.as_str());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rows = Vec::with_capacity(points.len());
    for (value, point) in values.iter().zip(&points) {
        let rel = PathBuf::from(slug(value));
        let pdir = dir.join(&rel);
        let hash = hash_of(&serde_json::json!({
            "generate": gen_hash,
            "point": serde_json::to_value(point)?,
            "seeds": config.segmentation.seeds,
        }));
        let marker = pdir.join("complete.txt");
        let done = std::fs::read_to_string(&marker).map(|h| h == hash).unwrap_or(false);
        let report = if done {
            log::info!("ablation {param}={value}: up to date");
            MetricsReport::load(&pdir, "cases")?
        } else {
            log::info!("ablation {param}={value}: running");
            let report = run_point(config, &records, &cache, point)?;
            report.save(&pdir, "cases")?;
            std::fs::write(&marker, &hash).map_err(|e| Error::io(&marker, e))?;
            report
        };
        let dice = report.aggregate("dice").expect("segmentation metric");
        rows.push(SweepRow {
            value: value.clone(),
            cases: report.rows.len(),
            dice_mean: dice.mean,
            dice_std: dice.std,
            hd95_mean: report.mean("hd95"),
            assd_mean: report.mean("assd"),
            plateau: param == SweepParam::N && point.train.n >= 10,
            dir: rel,
        });
    }
    write_sweep(&dir, param, &rows)?;
    Ok(AblationTable { param, dir, rows })
}

fn write_sweep(dir: &Path, param: SweepParam, rows: &[SweepRow]) -> Result<()> {
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["value", "cases", "dice_mean", "dice_std", "hd95_mean", "assd_mean", "plateau"])?;
    for r in rows {
        w.write_record([
            r.value.clone(),
            r.cases.to_string(),
            r.dice_mean.to_string(),
            r.dice_std.to_string(),
            r.hd95_mean.to_string(),
            r.assd_mean.to_string(),
            r.plateau.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let labels: Vec<String> = rows.iter().map(|r| r.value.clone()).collect();
    line_chart(
        &dir.join("sweep.svg"),
        &format!("Dice over {param}"),
        param.as_str(),
        "Dice",
        &labels,
        &[
            ("mean", rows.iter().map(|r| r.dice_mean).collect()),
            ("mean - std", rows.iter().map(|r| r.dice_mean - r.dice_std).collect()),
        ],
    )?;
    line_chart(
        &dir.join("sweep_hd95.svg"),
        &format!("HD95 over {param}"),
        param.as_str(),
        "HD95",
        &labels,
        &[("mean", rows.iter().map(|r| r.hd95_mean).collect())],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sweeps_have_expected_lengths() {
        assert_eq!(SweepParam::Alpha.default_values().len(), 11);
        assert_eq!(SweepParam::N.default_values().len(), 5);
        assert_eq!(SweepParam::PatchSize.default_values().len(), 4);
        assert_eq!(SweepParam::Backbone.default_values().len(), 5);
        assert_eq!(SweepParam::Alpha.default_values()[3], "0.3");
    }

    #[test]
    fn unknown_parameter_is_a_config_error() {
        let err = run_ablation(&RunConfig::default(), "dropout", &[]).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn point_parsing() {
        let c = RunConfig::default();
        let p = point_for(SweepParam::PatchSize, "image-size", &c, 32).unwrap();
        assert_eq!(p.train.patch_size, Some(32));
        assert!(point_for(SweepParam::Alpha, "1.5", &c, 32).is_err());
        assert!(point_for(SweepParam::Backbone, "vit", &c, 32).is_err());
        let p = point_for(SweepParam::Backbone, "residual-unet", &c, 32).unwrap();
        assert_eq!(p.backbone.kind, BackboneKind::ResidualUnet);
    }
}
