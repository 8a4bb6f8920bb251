use std::path::PathBuf;

/// Failure of a harness command. [`CliError::exit_code`] maps it onto the
/// process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(clare_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 0 success, 2 configuration, 3 numerical, 4 checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Locked(_) | CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<clare_core::Error> for CliError {
    fn from(e: clare_core::Error) -> Self {
        use clare_core::Error as E;
        match e {
            E::NonFinite { .. } | E::NonScalarLoss { .. } => CliError::Numerical(e.to_string()),
            E::Config(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(clare_core::Error::NonFinite { context: "loss".into() }).exit_code(), 3);
        assert_eq!(CliError::Checkpoint("x".into()).exit_code(), 4);
        assert_eq!(CliError::from(clare_core::Error::Config("bad".into())).exit_code(), 2);
    }
}
