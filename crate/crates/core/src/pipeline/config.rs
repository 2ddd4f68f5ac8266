use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augmentation::{CacheConfig, ClassicKind, ClassicRanges};
use crate::datagen::{CorpusSpec, LayoutConfig, SegTaskSpec};
use crate::denoiser::{DenoiserConfig, DiffusionTrainConfig};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::segmentation::{SegBackboneSpec, SegTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Pretrain,
    Finetune,
    Generate,
    EvalGen,
    TrainSeg,
    EvalSeg,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 7] = [
        Stage::Data,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Generate,
        Stage::EvalGen,
        Stage::TrainSeg,
        Stage::EvalSeg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Generate => "generate",
            Stage::EvalGen => "eval-gen",
            Stage::TrainSeg => "train-seg",
            Stage::EvalSeg => "eval-seg",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {s:?}")))
    }
}

/// A segmentation training recipe compared in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Baseline,
    DiffBoost,
    Classic(ClassicKind),
}

impl Method {
    /// Row label in reports.
    pub fn label(&self) -> String {
        match self {
            Method::Baseline => "Baseline".into(),
            Method::DiffBoost => "DiffBoost".into(),
            Method::Classic(k) => format!("Classic ({})", k.as_str()),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DiffBoost => "diffboost",
            Method::Classic(k) => k.as_str(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "diffboost" => Ok(Method::DiffBoost),
            other => other.parse().map(Method::Classic).map_err(|_| {
                Error::InvalidConfig(format!("unknown method {other:?}: use baseline, diffboost or a classic transform"))
            }),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalData {
    pub root: PathBuf,
    #[serde(default)]
    pub layout: LayoutConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub corpus: CorpusSpec,
    pub task: SegTaskSpec,
    /// Labelled cases kept out of training, used to score generation.
    pub heldout: usize,
    /// Replaces the synthetic segmentation task when set.
    pub external: Option<ExternalData>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            task: SegTaskSpec::default(),
            heldout: 32,
            external: None,
        }
    }
}

/// Optimizer settings of one diffusion training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionStage {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub freeze_main: bool,
}

impl DiffusionStage {
    fn from_defaults(d: DiffusionTrainConfig) -> Self {
        Self {
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            batch_size: d.batch_size,
            max_steps: d.max_steps,
            freeze_main: d.freeze_main,
        }
    }

    pub fn pretrain() -> Self {
        Self::from_defaults(DiffusionTrainConfig::pretrain_default())
    }

    pub fn finetune() -> Self {
        Self::from_defaults(DiffusionTrainConfig::finetune_default())
    }

    pub fn train_config(&self, model: &DenoiserConfig, schedule: ScheduleConfig) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            model: model.clone(),
            schedule,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            freeze_main: self.freeze_main,
        }
    }
}

impl Default for DiffusionStage {
    fn default() -> Self {
        Self::pretrain()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialStage {
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    max_steps: Option<usize>,
    freeze_main: Option<bool>,
}

/// Keys missing from a `[finetune]` table fall back to the finetuning
/// defaults rather than the pretraining ones.
fn finetune_with_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<DiffusionStage, D::Error> {
    let p = PartialStage::deserialize(d)?;
    let f = DiffusionStage::finetune();
    Ok(DiffusionStage {
        learning_rate: p.learning_rate.unwrap_or(f.learning_rate),
        weight_decay: p.weight_decay.unwrap_or(f.weight_decay),
        epochs: p.epochs.unwrap_or(f.epochs),
        batch_size: p.batch_size.unwrap_or(f.batch_size),
        max_steps: p.max_steps.or(f.max_steps),
        freeze_main: p.freeze_main.unwrap_or(f.freeze_main),
    })
}

fn default_finetune() -> DiffusionStage {
    DiffusionStage::finetune()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub backbone: SegBackboneSpec,
    pub train: SegTrainConfig,
    /// Independent repetitions; each has its own folds and initialization.
    pub seeds: usize,
    pub methods: Vec<Method>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            backbone: SegBackboneSpec::default(),
            train: SegTrainConfig::default(),
            seeds: 3,
            methods: vec![Method::Baseline, Method::DiffBoost],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Samples denoised together when scoring generation.
    pub batch_size: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { batch_size: 32 }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Skip stages whose outputs already match this configuration.
    pub resume: bool,
    /// Stages to execute; empty means all of them.
    pub stages: Vec<Stage>,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub pretrain: DiffusionStage,
    #[serde(default = "default_finetune", deserialize_with = "finetune_with_defaults")]
    pub finetune: DiffusionStage,
    pub cache: CacheConfig,
    pub segmentation: SegmentationConfig,
    pub classic: ClassicRanges,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            resume: false,
            stages: Vec::new(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::desk(),
            denoiser: DenoiserConfig::default(),
            pretrain: DiffusionStage::pretrain(),
            finetune: DiffusionStage::finetune(),
            cache: CacheConfig::default(),
            segmentation: SegmentationConfig::default(),
            classic: ClassicRanges::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.schedule.build()?;
        self.pretrain.train_config(&self.denoiser, self.schedule).validate()?;
        self.finetune.train_config(&self.denoiser, self.schedule).validate()?;
        self.segmentation.backbone.validate()?;
        self.segmentation.train.validate()?;
        if self.segmentation.seeds == 0 {
            return Err(Error::InvalidConfig("segmentation.seeds must be at least 1".into()));
        }
        if self.cache.n == 0 || self.cache.batch_size == 0 || self.metrics.batch_size == 0 {
            return Err(Error::InvalidConfig("cache.n and batch sizes must be positive".into()));
        }
        if self.cache.n < self.segmentation.train.n && self.segmentation.methods.contains(&Method::DiffBoost) {
            return Err(Error::InvalidConfig(format!(
                "segmentation draws from {} variants but the cache holds {}",
                self.segmentation.train.n, self.cache.n
            )));
        }
        let side = self.segmentation.backbone.min_side();
        let size = self.data.task.size;
        if self.data.external.is_none() && size % side != 0 {
            return Err(Error::InvalidConfig(format!("task size {size} is not a multiple of {side}")));
        }
        Ok(())
    }

    /// Selected stages in execution order.
    pub fn selected_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| self.stages.is_empty() || self.stages.contains(s))
            .collect()
    }

    pub fn uses_cache(&self) -> bool {
        self.segmentation.methods.contains(&Method::DiffBoost)
    }

    /// Direct upstream stages of `stage` under this configuration.
    pub fn dependencies(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Data => vec![],
            Stage::Pretrain => vec![Stage::Data],
            Stage::Finetune => vec![Stage::Data, Stage::Pretrain],
            Stage::Generate | Stage::EvalGen => vec![Stage::Data, Stage::Finetune],
            Stage::TrainSeg if self.uses_cache() => vec![Stage::Data, Stage::Generate],
            Stage::TrainSeg => vec![Stage::Data],
            Stage::EvalSeg => vec![Stage::Data, Stage::TrainSeg],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.segmentation.methods.push(Method::Classic(ClassicKind::Rotate));
        c.data.external = Some(ExternalData {
            root: "ext".into(),
            layout: LayoutConfig::default(),
        });
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_take_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[finetune]\nepochs = 7\n[segmentation.train]\nalpha = 0.25\n").unwrap();
        assert_eq!(c.finetune.epochs, 7);
        assert_eq!(c.finetune.learning_rate, DiffusionStage::finetune().learning_rate);
        assert_eq!(c.segmentation.train.alpha, 0.25);
        assert_eq!(c.segmentation.train.n, 10);
    }

    #[test]
    fn unknown_keys_and_methods_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Toml(_))));
        let err = RunConfig::from_toml("[segmentation]\nmethods = [\"mixup\"]").unwrap_err();
        assert!(err.to_string().contains("mixup"), "{err}");
        assert_eq!("deep-stack".parse::<Method>().unwrap(), Method::Classic(ClassicKind::DeepStack));
    }

    #[test]
    fn stage_selection_keeps_order() {
        let c = RunConfig {
            stages: vec![Stage::EvalSeg, Stage::Data],
            ..RunConfig::default()
        };
        assert_eq!(c.selected_stages(), vec![Stage::Data, Stage::EvalSeg]);
        assert_eq!(RunConfig::default().selected_stages().len(), 7);
    }
}
