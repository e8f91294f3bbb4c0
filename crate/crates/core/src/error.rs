use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// Shape and argument problems are reported eagerly when an operation is
/// recorded, parse errors carry enough position information to locate the
/// corrupt bytes, and training failures name the step that diverged.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("invalid argument: {0}")]
    Arg(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("autodiff usage error: {0}")]
    Autodiff(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training failure at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error("truncated payload: needed {expected} more bytes at offset {offset}")]
    Truncated { offset: u64, expected: u64 },

    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
