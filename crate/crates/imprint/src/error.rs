use std::path::PathBuf;

/// Errors from file formats, job resolution, sessions and the service.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] imprint_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// A job field failed to parse or validate.
    #[error("invalid job field `{field}`: {message}")]
    Job { field: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format { path: path.into(), message: message.to_string() }
    }

    /// True for problems the caller can fix by changing the invocation.
    pub fn is_user_error(&self) -> bool {
        use imprint_core::Error as C;
        match self {
            Error::Job { .. } | Error::Usage(_) | Error::Format { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Core(c) => matches!(
                c,
                C::Config(_) | C::UnknownLayer(_) | C::Shape(_) | C::Invalid(_) | C::NeedsClassHint | C::UnknownExtractor(_)
            ),
            Error::Runtime(_) => false,
        }
    }
}
