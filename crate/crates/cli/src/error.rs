use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] lace_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 success, 1 other, 2 config or parse error, 3 capability error,
    /// 4 numeric error.
    pub fn exit_code(&self) -> i32 {
        use lace_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::Argument(_) | E::Parse { .. } => 2,
                E::Capability(_) => 3,
                E::Numeric(_) | E::Stiffness { .. } | E::Infeasible { .. } => 4,
                E::Data(_) | E::Format { .. } | E::Io(_) | E::Csv(_) => 1,
            },
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}
