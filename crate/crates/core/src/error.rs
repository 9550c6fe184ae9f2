use thiserror::Error;

/// Error type shared by every stage of the pipeline.
///
/// The variants map onto the CLI exit-code contract: `Numeric` exits 3,
/// everything else exits 2 (usage errors never reach this type).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of its documented range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (files, labels, datasets).
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was called out of order or with unsatisfied preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A persisted artifact failed its checksum or is missing.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI surface: 3 for numeric failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
