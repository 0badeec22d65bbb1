use std::fmt;

/// Broad failure classes, used by the command-line front end to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Integrity,
    Divergence,
    Contract,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownLanguage(_) | Error::Conflict(_) => ErrorKind::Config,
            Error::Data(_) => ErrorKind::Data,
            Error::Integrity(_) | Error::Version { .. } => ErrorKind::Integrity,
            Error::NonFinite { .. } | Error::Divergence { .. } => ErrorKind::Divergence,
            Error::Dimension(_) | Error::Index(_) | Error::Contract(_) => ErrorKind::Contract,
            Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(context: impl fmt::Display, source: std::io::Error) -> Self {
        Error::Io {
            context: context.to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
