//! Error taxonomy shared by the whole pipeline.
//!
//! Every variant maps to a stable machine-parseable category string that the
//! CLI prints on failure, so scripts can branch on the kind of error without
//! parsing prose.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Caller handed us something unusable (bad arguments, empty batch,
    /// too few samples, unknown style id, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Array dimensions disagree with the declared contract.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Numerical failure: SVD did not converge, a loss went non-finite, a
    /// matrix was singular where it must not be.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// On-disk data (dataset, manifest, checkpoint) is malformed or has an
    /// unsupported version.
    #[error("data format error: {0}")]
    DataFormat(String),

    /// Stored checksum does not match the bytes read back.
    #[error("checksum mismatch: {0}")]
    Checksum(String),

    /// A checkpoint tagged for one pipeline stage was fed to another.
    #[error("stage mismatch: expected {expected}, got {got}")]
    StageMismatch { expected: String, got: String },

    /// Sprite motion estimation failed: no blob stood out from the
    /// background, or the rotation search never correlated.
    #[error("sprite not detected (correlation {correlation:.3})")]
    SpriteNotDetected { correlation: f64 },

    /// Configuration failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// Stable category tag for machine-parseable CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            CoreError::InvalidInput(_) => "invalid-input",
            CoreError::ShapeMismatch(_) => "shape-mismatch",
            CoreError::Numerical(_) => "numerical",
            CoreError::DataFormat(_) => "data-format",
            CoreError::Checksum(_) => "checksum",
            CoreError::StageMismatch { .. } => "stage-mismatch",
            CoreError::SpriteNotDetected { .. } => "sprite-not-detected",
            CoreError::Config(_) => "config",
            CoreError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
