use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("corrector for coarse dof {dof} (patch seed element {seed}, {layers} layers) failed: {reason}")]
    Corrector {
        dof: usize,
        seed: usize,
        layers: usize,
        reason: String,
    },
    #[error("linear solver failed: {0}")]
    LinearSolve(String),
    #[error("eigensolver did not converge: {0}")]
    Eigen(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Factorization(_) | Error::Corrector { .. } | Error::LinearSolve(_) | Error::Eigen(_)
        )
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
