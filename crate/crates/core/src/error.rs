//! Error types shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Shape or size mismatch between operands.
    Dimension(String),
    /// An input violated a documented precondition (e.g. non-centered features).
    Precondition(String),
    /// Iterative decomposition did not converge within its sweep budget.
    Convergence { what: &'static str, iterations: usize },
    /// Matrix is not positive semi-definite within tolerance.
    NotPositiveSemiDefinite { min_eigenvalue: f64 },
    /// Too few samples for the requested statistic.
    InsufficientSamples { needed: usize, got: usize },
    /// Batch carries no usable variation (e.g. all rows identical).
    DegenerateBatch,
    /// A vector with zero norm cannot be cosine-compared.
    DegenerateVector,
    /// NaN or infinity encountered where finite values are required.
    NonFinite(String),
    /// Index or count outside the valid range.
    Bounds(String),
    /// Parameter value outside its documented range.
    Range(String),
    /// Layer stack or training configuration is invalid.
    InvalidConfig(String),
    /// Forward cache does not match the encoder state it is replayed against.
    State(String),
    /// A dataset with zero samples was requested or encountered.
    EmptyDataset,
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, batch: usize },
    /// On-disk artifact is corrupt, truncated, or has the wrong version.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::Convergence { what, iterations } => {
                write!(f, "{what} did not converge after {iterations} sweeps")
            }
            Error::NotPositiveSemiDefinite { min_eigenvalue } => {
                write!(f, "matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")
            }
            Error::InsufficientSamples { needed, got } => {
                write!(f, "insufficient samples: need at least {needed}, got {got}")
            }
            Error::DegenerateBatch => write!(f, "degenerate batch: no variation across rows"),
            Error::DegenerateVector => write!(f, "degenerate vector: zero norm"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Bounds(msg) => write!(f, "out of bounds: {msg}"),
            Error::Range(msg) => write!(f, "parameter out of range: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::EmptyDataset => write!(f, "empty dataset"),
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
