use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("adaptation required: expert `{expert}` expects {expected}x{expected} input, got {actual}x{actual}")]
    AdaptationRequired {
        expert: String,
        expected: usize,
        actual: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step} of stage `{stage}`")]
    Diverged { stage: String, step: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("incomplete fixture: no row for combination {0}")]
    Incomplete(String),

    #[error("evaluation of {combination} failed: {source}")]
    Evaluation {
        combination: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
