use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed JSONL record: {message}")]
    MalformedJsonl {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset {0:?} is empty")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The target has no scored token left once the skip rule is applied.
    /// Callers record the sample as skipped and keep going.
    #[error("sample unscorable: {0}")]
    Unscorable(String),

    #[error("prompt of {len} chars exceeds the model window of {max} chars")]
    PromptTooLong { len: usize, max: usize },

    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("provider returned HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("sample {sample_id}{}: {source}", seed.map(|s| format!(" (seed {s})")).unwrap_or_default())]
    Sample {
        sample_id: String,
        seed: Option<u32>,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn in_sample(self, sample_id: &str, seed: Option<u32>) -> Self {
        Error::Sample {
            sample_id: sample_id.to_string(),
            seed,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 provider/protocol, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Transport { .. }
            | Error::HttpStatus { .. }
            | Error::Protocol(_)
            | Error::PromptTooLong { .. } => 3,
            Error::Io { .. }
            | Error::MalformedJsonl { .. }
            | Error::EmptyDataset(_)
            | Error::Unscorable(_) => 4,
            Error::Sample { source, .. } => source.exit_code(),
            Error::Serialization(_) | Error::Internal(_) => 1,
        }
    }

    pub fn is_unscorable(&self) -> bool {
        match self {
            Error::Unscorable(_) => true,
            Error::Sample { source, .. } => source.is_unscorable(),
            _ => false,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
