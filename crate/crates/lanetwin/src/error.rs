use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}{}: {source}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Json {
        path: PathBuf,
        line: Option<usize>,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] lanetwin_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, line: Option<usize>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.to_path_buf(),
            line,
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Bad user input (missing or malformed files, invalid settings) as
    /// opposed to a failure while running.
    pub fn is_config(&self) -> bool {
        use lanetwin_core::Error as C;
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Json { .. } | Error::Format { .. } | Error::Config(_) => true,
            Error::Failed(_) => false,
            Error::Core(e) => matches!(
                e,
                C::Config(_) | C::InvalidArgument(_) | C::OutOfRange { .. } | C::Capacity { .. } | C::Infeasible(_) | C::Mapping(_)
            ),
        }
    }
}
