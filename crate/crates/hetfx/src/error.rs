use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A named column is missing from the file or misdeclared in the schema.
    #[error("schema error: column '{column}': {message}")]
    Schema { column: String, message: String },

    /// A cell value violates the data contract. Rows are 1-based and count
    /// data rows, excluding the header.
    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Design matrix is rank deficient beyond what ridge regularization of
    /// degenerate columns can absorb.
    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    /// Every observation received zero kernel weight at an evaluation point.
    #[error("empty neighborhood at evaluation point {at}")]
    EmptyNeighborhood { at: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
