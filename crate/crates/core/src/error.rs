use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A user-facing configuration value is out of range or malformed.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Array shapes or call preconditions do not line up.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported problem: {0}")]
    Unsupported(String),

    #[error("singular normal matrix ({context}); use a positive ridge or a smaller basis")]
    SingularRegression { context: String },

    /// A numerical check that should hold exactly did not.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 configuration, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Contract(_) | Error::Unsupported(_) => 2,
            Error::SingularRegression { .. } | Error::Numerical(_) => 3,
            Error::Format(_) | Error::Io(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }

    /// The innermost error, with stage wrappers peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
