use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value became NaN/Inf, or an operation was undefined (division by zero, log of a
    /// non-positive number, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API contract violated by the caller (e.g. backward from a non-scalar node).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    /// Analog precoder or connection matrix violates the hardware structure.
    #[error("structure error: {0}")]
    Structure(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Exhaustive search refused because the candidate space is too large.
    #[error("search space too large: {candidates} candidates exceeds limit {limit}")]
    SearchGuard { candidates: u128, limit: u128 },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss. The diagnostics describe the state at the abort.
    #[error("non-finite loss at epoch {} batch {}", .0.epoch, .0.batch)]
    NanAbort(Box<crate::trainer::NanDiagnostics>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
