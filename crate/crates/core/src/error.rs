use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value left the finite reals, or an argument is outside its domain.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Shapes disagree, or a tape/graph is malformed.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate frequency table: {0}")]
    DegenerateFrequency(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::NumericDomain(msg.into())
    }
}
