use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("integration blew up at state {state:?}")]
    IntegrationBlowup { state: Vec<f64> },

    /// `a(x) > 0` while `b(x)` vanishes: the dissipation constraint cannot be
    /// met at `state`, so the candidate is not a CLF there.
    #[error("CLF condition violated at {state:?}: a = {a:e}, |b| = {b_norm:e}")]
    ClfViolation { state: Vec<f64>, a: f64, b_norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical abort at epoch {epoch}: {reason}")]
    NumericalAbort {
        epoch: usize,
        reason: String,
        dump: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
