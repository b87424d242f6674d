use thiserror::Error;

/// Errors raised across fitting, prediction and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("all categorical log-weights are -inf")]
    DegenerateWeights,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{}", fmt_input(.line, .msg))]
    Input { line: Option<usize>, msg: String },

    #[error("non-finite value produced by step `{step}` at iteration {iteration}")]
    NonFinite { step: &'static str, iteration: usize },

    #[error("sampler diverged: {0}")]
    Diverged(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_input(line: &Option<usize>, msg: &str) -> String {
    match line {
        Some(l) => format!("input error at line {l}: {msg}"),
        None => format!("input error: {msg}"),
    }
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input { line: None, msg: msg.into() }
    }

    pub fn input_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Input { line: Some(line), msg: msg.into() }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input { .. } | Error::Csv(_) | Error::Dimension(_) | Error::Parameter(_) => 2,
            Error::Io(_) | Error::Json(_) => 2,
            Error::NonFinite { .. } | Error::Diverged(_) | Error::DegenerateWeights => 3,
            Error::Domain(_) => 3,
            Error::Invariant(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
