use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape, length or dimension disagreement.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    /// A value outside an operation's domain (exponent of zero, negative stddev, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty batch")]
    EmptyBatch,

    /// Backward called with a tape that does not belong to the latest forward pass.
    #[error("stale or mismatched tape: {0}")]
    StaleTape(String),

    /// Unrecoverable non-finite value (baseline loss, optimizer input).
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }
}
