use thiserror::Error;

/// Errors produced by the flow laboratory.
#[derive(Debug, Error)]
pub enum KrfError {
    /// A configuration value is out of range. `field` names the offending key.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Text that could not be parsed (config file or expression).
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Model data violates a structural requirement (definiteness, positivity).
    #[error("model error: {0}")]
    Model(String),

    /// A matrix that must be positive semidefinite is not.
    #[error("admissibility error at node {node}: smallest eigenvalue {min_eigenvalue:e}")]
    Admissibility { node: usize, min_eigenvalue: f64 },

    /// A hypothesis of a barrier construction fails on the grid data.
    #[error("hypothesis error: {0}")]
    Hypothesis(String),

    /// Nonlinear solver failure; carries the residual history.
    #[error("solver error: {message} (after {} iterations)", history.len())]
    Solver { message: String, history: Vec<f64> },

    /// Time stepping could not keep the iterate admissible.
    #[error("stability error at t = {t}: step size {dt:e} below minimum, node {node}")]
    Stability { t: f64, dt: f64, node: usize },

    /// Something that the construction guarantees did not hold.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    /// A prerequisite artifact is missing or unreadable.
    #[error("missing dependency `{path}`: {message}")]
    Dependency { path: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KrfError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        KrfError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, KrfError>;
