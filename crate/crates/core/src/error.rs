use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Variants are grouped by how the CLI maps them to process exit statuses:
/// parameter/precondition problems exit 2, subcritical-model failures exit 3,
/// resource-cap hits exit 4, and I/O or encoding failures exit 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("level mismatch: {0}")]
    LevelMismatch(String),

    #[error("not a descendant: {0}")]
    NotDescendant(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("subcritical process: {0}")]
    Subcritical(String),

    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status the CLI maps this error to.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Subcritical(_) => 3,
            Error::ResourceCap(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
