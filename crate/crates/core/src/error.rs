use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("overflow in {what}: {detail}")]
    Overflow { what: &'static str, detail: String },

    #[error("{what} did not converge: {detail}")]
    NonConvergence {
        what: &'static str,
        detail: String,
        candidates: Vec<Vec<f64>>,
    },

    #[error("singular covariance at step {step} (min eigenvalue {min_eig:e})")]
    Singular { step: usize, min_eig: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate sampling: {0}")]
    DegenerateSampling(String),

    #[error("invalid limit-field spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("simulation diverged at step {step}: {detail}")]
    Simulation { step: usize, detail: String },

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("replication {rep} failed: {source}")]
    Replication {
        rep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_rep(self, rep: usize) -> Self {
        Error::Replication {
            rep,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
