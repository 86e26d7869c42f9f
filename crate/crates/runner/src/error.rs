use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] p2d_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint was written for a different configuration (hash {found}, expected {expected})")]
    ConfigMismatch { expected: String, found: String },

    #[error("invalid metrics record on line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("training diverged at step {0}")]
    Diverged(usize),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RunError>;
