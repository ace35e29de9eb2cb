use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller-side precondition was violated.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Malformed configuration (unknown key, bad value, inconsistent fields).
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint header is not something we can read.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// A specific checkpoint record is missing, truncated or has the wrong shape.
    #[error("checkpoint parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
