use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown tape node {0}")]
    UnknownNode(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("candidate {candidate}: {source}")]
    Candidate {
        candidate: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("prompt {prompt} ({variant}): {source}")]
    Cell {
        prompt: usize,
        variant: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips iteration/candidate/cell wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Iteration { source, .. }
            | Error::Candidate { source, .. }
            | Error::Cell { source, .. } => source.root(),
            other => other,
        }
    }
}
