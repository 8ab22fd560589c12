use thiserror::Error;

/// Errors raised across the workbench.
///
/// The harness maps `Domain` and `Io`/`Format` failures to exit code 1 and the
/// configuration-level failures (`TighteningInfeasible`, `TerminalSetEmpty`,
/// `NotStable`) to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("tightened constraint set is empty (offending row {row}: {detail})")]
    TighteningInfeasible { row: usize, detail: String },

    #[error("terminal set is empty or could not be certified: {0}")]
    TerminalSetEmpty(String),

    #[error("closed-loop matrix is not Schur stable (spectral radius {0})")]
    NotStable(f64),

    #[error("iteration cap of {0} reached")]
    MaxIterations(usize),

    #[error("safety certification failed: {0}")]
    CertificationFailed(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Process exit code for this error: 2 for infeasible configurations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::TighteningInfeasible { .. }
            | Error::TerminalSetEmpty(_)
            | Error::NotStable(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "{name}: non-finite input {values:?}"
        )))
    }
}
