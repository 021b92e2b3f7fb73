use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EtrError>;

#[derive(Debug, Error)]
pub enum EtrError {
    /// Bad arguments or ids handed to a library call.
    #[error("invalid input: {0}")]
    Input(String),

    /// A bundle file failed validation.
    #[error("{file}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Validation {
        file: String,
        line: Option<usize>,
        message: String,
    },

    /// The model lacks state an operation depends on (e.g. no gradient snapshot).
    #[error("missing state: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EtrError {
    pub fn input(msg: impl Into<String>) -> Self {
        EtrError::Input(msg.into())
    }

    pub fn validation(
        file: impl Into<String>,
        line: Option<usize>,
        msg: impl Into<String>,
    ) -> Self {
        EtrError::Validation {
            file: file.into(),
            line,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EtrError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EtrError::Input(_) | EtrError::Validation { .. } => 1,
            EtrError::Numeric(_) | EtrError::Divergence { .. } => 2,
            EtrError::Io { .. } => 3,
            EtrError::State(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EtrError::Input(_) => "input",
            EtrError::Validation { .. } => "validation",
            EtrError::State(_) => "state",
            EtrError::Numeric(_) => "numeric",
            EtrError::Divergence { .. } => "divergence",
            EtrError::Io { .. } => "io",
        }
    }
}
