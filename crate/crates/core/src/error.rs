use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum CoreSegError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("patch size {patch} exceeds scene dimensions {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("input {height}x{width} is not divisible by {divisor} (required by {blocks} encoder blocks)")]
    Divisibility {
        height: usize,
        width: usize,
        divisor: usize,
        blocks: usize,
    },

    #[error("label {0} is not in the LOCO remap domain")]
    UnknownLabel(i32),

    #[error("AUROC is undefined: {0}")]
    UndefinedAuroc(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("artifact chain mismatch: {0}")]
    ArtifactChain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CoreSegError>,
    },

    #[error("bad archive {path}: {detail}")]
    Archive { path: PathBuf, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("npy error: {0}")]
    Npy(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, CoreSegError>;

impl CoreSegError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreSegError::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CoreSegError::Shape(msg.into())
    }

    /// Wrap an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ CoreSegError::Stage { .. } => e,
            e => CoreSegError::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the CLI: 2 config, 3 stage failure, 4 artifact chain.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreSegError::Config(_) => 2,
            CoreSegError::ArtifactChain(_) => 4,
            CoreSegError::Stage { source, .. } => match source.as_ref() {
                CoreSegError::ArtifactChain(_) => 4,
                CoreSegError::Config(_) => 2,
                _ => 3,
            },
            _ => 3,
        }
    }
}
