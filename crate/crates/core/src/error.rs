use thiserror::Error;

/// Errors raised across the training, accounting and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numerical overflow: {0}")]
    Overflow(String),

    #[error("privacy budget infeasible: {0}")]
    BudgetInfeasible(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("data error at line {line}: {message}")]
    Data { line: u64, message: String },

    #[error("cannot load dataset {path}: {source}")]
    DataLoad {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// Process exit status: 2 config, 3 data, 4 budget infeasible, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data { .. } | Error::DataLoad { .. } | Error::Csv(_) => 3,
            Error::BudgetInfeasible(_) => 4,
            Error::Client { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
