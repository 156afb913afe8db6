use thiserror::Error;

/// Error type shared across the pipeline stages.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration (bad counts, probabilities out of range, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Could not place all requested instances under the overlap cap.
    #[error("placement error: {0}")]
    Placement(String),

    /// Malformed model input (id out of range, shape mismatch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// API misuse (e.g. oracle proposer without ground truth).
    #[error("usage error: {0}")]
    Usage(String),

    /// Numeric guard tripped (non-finite loss, zero-norm embedding, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file had the wrong magic, version or layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Exit code the CLI maps this error to (1 = config, 2 = runtime).
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 1,
            _ => 2,
        }
    }
}
