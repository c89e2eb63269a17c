use thiserror::Error;

/// Failure modes surfaced by the library. Configuration problems are kept
/// distinct from runtime problems so the CLI can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("window of {got} frames is shorter than the receptive field ({needed})")]
    WindowTooShort { needed: usize, got: usize },

    #[error("label {label} out of range for {num_targets} targets")]
    LabelOutOfRange { label: usize, num_targets: usize },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
