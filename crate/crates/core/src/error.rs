use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents for an operation.
    #[error("dimension error in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    /// A caller broke an operation's contract (non-scalar loss, misaligned
    /// sequence lengths, non-binary ground truth, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Model/run configuration is inconsistent with itself or with a checkpoint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file did not conform to its declared format.
    #[error("format error at byte {offset}: {details}")]
    Format { offset: u64, details: String },

    /// A non-finite value was detected where finiteness is an invariant.
    #[error("corrupt state: non-finite value in {node}")]
    Corrupt { node: String },

    /// A scene specification cannot be rendered.
    #[error("spec error: {0}")]
    Scene(String),

    /// Checksum or determinism verification failed.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension { op, details: details.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(offset: u64, details: impl Into<String>) -> Self {
        Error::Format { offset, details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
