use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the tensor engine, models, attacks, and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes. Names both shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An input value violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A file did not parse as the expected format.
    #[error("format error ({location}): {message}")]
    Format { location: String, message: String },

    /// A checkpoint cannot be used with the requested model or version.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Training or evaluation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Pearson correlation of a constant series is undefined.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}
