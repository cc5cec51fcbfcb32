use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },

    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("timestep {0} has no predecessor")]
    StepUnderflow(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("insufficient history: no value recorded at timestep {0}")]
    InsufficientHistory(usize),

    #[error("out-of-order step: expected timestep {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Param { field, reason: reason.into() }
    }

    /// Short machine-readable tag used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param { .. } => "parameter",
            Error::Shape { .. } => "shape",
            Error::StepUnderflow(_) => "step_underflow",
            Error::NonFinite(_) => "numeric",
            Error::Degenerate(_) => "degenerate_input",
            Error::InsufficientHistory(_) => "insufficient_history",
            Error::Sequencing { .. } => "sequencing",
            Error::Plan(_) => "plan",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { expected, got });
    }
    Ok(())
}

pub(crate) fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
