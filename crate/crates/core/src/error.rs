use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("svd did not converge: off-diagonal residual {residual:e} after {sweeps} sweeps")]
    SvdNonConvergence { residual: f64, sweeps: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numeric failures map to process exit code 2, everything else to 1.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::SvdNonConvergence { .. } | Error::Training(_)
        )
    }
}
