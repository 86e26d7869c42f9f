use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("prediction needs at least {required} previous frames, got {actual}")]
    InsufficientFrames { required: usize, actual: usize },

    #[error("feature for timestep {0} is not aligned to the current frame")]
    Unaligned(usize),

    #[error("feature for timestep {0} is already aligned to the current frame")]
    AlreadyAligned(usize),

    #[error("query count {k} outside 1..={cells}")]
    QueryCount { k: usize, cells: usize },

    #[error("duplicate query position {0:?}")]
    DuplicateQuery((usize, usize)),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("unsupported episode schema version {0}")]
    SchemaVersion(u32),

    #[error("malformed episode record: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
