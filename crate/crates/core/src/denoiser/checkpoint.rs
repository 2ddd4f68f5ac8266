use std::fmt;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{DenoiserConfig, DualBranchDenoiser};
use crate::conditioning::Vocabulary;
use crate::container::Container;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::ParamBlock;

pub const DENOISER_KIND: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingStage {
    Pretrained,
    Finetuned,
}

impl fmt::Display for TrainingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingStage::Pretrained => "pretrained",
            TrainingStage::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: DenoiserConfig,
    schedule: ScheduleConfig,
    alpha_bar_final: f64,
    vocabulary: String,
    vocabulary_hash: String,
    stage: TrainingStage,
    seed: u64,
    step: u64,
}

/// Trained denoiser parameters with everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub vocab: Vocabulary,
    pub stage: TrainingStage,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn from_model(
        model: &DualBranchDenoiser,
        schedule: ScheduleConfig,
        stage: TrainingStage,
        seed: u64,
        step: u64,
    ) -> Result<Self> {
        Ok(Self {
            config: model.config().clone(),
            schedule,
            vocab: model.vocab().clone(),
            stage,
            seed,
            step,
            params: model.params().to_blocks()?,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    /// Rebuilds the model with these parameters.
    pub fn instantiate(&self, dtype: DType) -> Result<DualBranchDenoiser> {
        let mut model = DualBranchDenoiser::new(&self.config, &self.vocab, self.schedule.steps, dtype, self.seed)?;
        model.params_mut().load_blocks(&self.params)?;
        Ok(model)
    }

    fn to_container(&self) -> Result<Container> {
        let meta = Meta {
            config: self.config.clone(),
            schedule: self.schedule,
            alpha_bar_final: self.schedule()?.alpha_bar(self.schedule.steps),
            vocabulary: self.vocab.to_text(),
            vocabulary_hash: self.vocab.hash(),
            stage: self.stage,
            seed: self.seed,
            step: self.step,
        };
        Ok(Container {
            kind: DENOISER_KIND.into(),
            meta: serde_json::to_value(meta)?,
            blocks: self.params.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    /// Content hash identifying this checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        if c.kind != DENOISER_KIND {
            return Err(Error::Checkpoint(format!("expected a {DENOISER_KIND} checkpoint, found {}", c.kind)));
        }
        let meta: Meta = serde_json::from_value(c.meta)?;
        let vocab = Vocabulary::parse(&meta.vocabulary)?;
        if vocab.hash() != meta.vocabulary_hash {
            return Err(Error::Checkpoint("stored vocabulary does not match its hash".into()));
        }
        let schedule = meta.schedule.build()?;
        if schedule.alpha_bar(meta.schedule.steps).to_bits() != meta.alpha_bar_final.to_bits() {
            return Err(Error::Checkpoint("stored schedule is inconsistent with its parameters".into()));
        }
        meta.config.validate()?;
        Ok(Self {
            config: meta.config,
            schedule: meta.schedule,
            vocab,
            stage: meta.stage,
            seed: meta.seed,
            step: meta.step,
            params: c.blocks,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_container()?.write(path)
}

/// Loads a checkpoint and checks it was trained over `vocab`.
pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.vocab.hash() != vocab.hash() {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash mismatch: checkpoint {} vs expected {}",
            &ckpt.vocab.hash()[..12],
            &vocab.hash()[..12]
        )));
    }
    Ok(ckpt)
}

/// Loads a checkpoint with only its internal consistency checks.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            depth: 2,
            time_embed_dim: 16,
            text_embed_dim: 8,
            edge_branch_channels: vec![4, 8],
            attention_at_bottleneck: true,
            head_channels: 3,
            norm_groups: 4,
        }
    }

    fn ckpt() -> Checkpoint {
        let sc = ScheduleConfig {
            steps: 20,
            ..ScheduleConfig::default()
        };
        let m = DualBranchDenoiser::new(&tiny(), &Vocabulary::default(), 20, DType::F32, 3).unwrap();
        Checkpoint::from_model(&m, sc, TrainingStage::Pretrained, 3, 17).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = ckpt();
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p, &Vocabulary::default()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.stage, TrainingStage::Pretrained);
        assert_eq!(back.stage.to_string(), "pretrained");
        let m = back.instantiate(DType::F32).unwrap();
        assert_eq!(m.params().to_blocks().unwrap(), c.params);
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt(), &p).unwrap();
        let mut other = Vocabulary::default();
        other.organ.push("Tube".into());
        let err = load_checkpoint(&p, &other).unwrap_err();
        assert!(err.to_string().contains("vocabulary hash mismatch"), "{err}");
    }

    #[test]
    fn corrupt_file_rejected() {
        let mut bytes = ckpt().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x55;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }
}
