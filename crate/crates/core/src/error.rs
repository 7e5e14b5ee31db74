use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("divergence guard tripped at epoch {epoch}: |u|_inf = {residual:.4e} exceeds limit {limit:.4e}")]
    Diverged { epoch: usize, residual: f64, limit: f64 },

    #[error("clean subset is empty")]
    EmptyCleanSet,

    #[error("class {class} is absent from the clean subset")]
    MissingClass { class: usize },

    #[error("clean subset is not balanced: {0}")]
    Imbalanced(String),

    #[error("not enough clean examples of class {class}: need {needed}, have {available}")]
    InsufficientClean { class: usize, needed: usize, available: usize },

    #[error("hypergradient backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
