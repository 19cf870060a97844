use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the numerical and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("subsystem index {index} out of range for {count} subsystem(s)")]
    InvalidSubsystem { index: usize, count: usize },

    #[error("operator is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("invalid density operator: {0}")]
    InvalidDensity(String),

    #[error("Hermitian eigensolver did not converge on a {dim}x{dim} matrix")]
    EigenConvergence { dim: usize },

    #[error("matrix function undefined at eigenvalue {eigenvalue:e}")]
    FunctionUndefined { eigenvalue: f64 },

    #[error("operator is rank deficient: min eigenvalue {min_eigenvalue:e} <= threshold {threshold:e}")]
    RankDeficient { min_eigenvalue: f64, threshold: f64 },

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error("Condition S does not hold: {0}")]
    ConditionS(String),

    #[error("model is not a CQ-LVM: {0}")]
    NotCqlvm(String),

    #[error("{what} needs {qubits} qubits, above the exact-path cap of {cap}")]
    QubitCap { what: String, qubits: usize, cap: usize },

    #[error("infeasible extension: {0}")]
    InfeasibleExtension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Idx(#[from] crate::data::idx::IdxError),

    #[error(transparent)]
    Format(#[from] crate::container::FormatError),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
