use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("unknown token {token:?} for role {role}")]
    Vocabulary { role: String, token: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("denoiser contract violated: {0}")]
    Contract(String),

    #[error("wrong training stage: {0}")]
    Stage(String),

    #[error("missing artifact for stage `{stage}`: run `{stage}` first")]
    Dependency { stage: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ingestion failed with {} problem(s): {}", .0.len(), .0.join("; "))]
    Ingestion(Vec<String>),

    #[error("no evaluation results found under {0}")]
    EmptyReport(PathBuf),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "config",
            Error::Argument(_) => "argument",
            Error::ShapeMismatch { .. } => "shape",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Validation(_) => "validation",
            Error::Contract(_) => "contract",
            Error::Stage(_) => "stage",
            Error::Dependency { .. } => "dependency",
            Error::Checkpoint(_) => "checkpoint",
            Error::Ingestion(_) => "ingestion",
            Error::EmptyReport(_) => "empty-report",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Toml(_) => "config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_shape(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}
