use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: fscil_core::Error,
    },
    #[error(transparent)]
    Core(#[from] fscil_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Wraps a core error with the name of the stage and seed that failed.
    pub fn stage(stage: impl Into<String>) -> impl FnOnce(fscil_core::Error) -> Self {
        let stage = stage.into();
        move |source| Error::Stage { stage, source }
    }

    /// 1 for configuration problems, 2 for runtime failures and contract
    /// violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Core(fscil_core::Error::Config(_)) => 1,
            Error::Stage {
                source: fscil_core::Error::Config(_),
                ..
            } => 1,
            _ => 2,
        }
    }
}
