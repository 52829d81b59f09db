use thiserror::Error;

/// Error type shared across the crate.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// configuration problems, data/shape problems, and numeric invariant
/// violations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("log of non-positive value {value:e} at linear index {index}")]
    NonPositiveLog { value: f64, index: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize, usize)),

    #[error("backward already ran on this tape; build a fresh graph")]
    BackwardTwice,

    #[error("ground truth has no foreground voxels")]
    EmptyGroundTruth,

    #[error("boundary is empty while the mask is not")]
    EmptyBoundary,

    #[error("empty tree")]
    EmptyTree,

    #[error("tree escapes the volume bounds at generation {generation}")]
    TreeOutOfBounds { generation: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("sidecar mismatch: {0}")]
    Sidecar(String),

    #[error("unknown dtype {0:?} (expected \"f64\")")]
    UnknownDtype(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric invariant violated: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code the CLI assigns to this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParam(_) => 2,
            Error::Numeric(_) | Error::NonPositiveLog { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
