use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("color space tag error: expected {expected}, got {actual}")]
    ColorSpaceTag {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("corpus layout error: {0}")]
    Layout(String),

    #[error("balance error: {0}")]
    Balance(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("tolerance not reached: {0}")]
    Tolerance(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("weight file error: {0}")]
    WeightFormat(String),

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Csv(format!("{:?}", other)),
        }
    }
}

/// Coarse classification used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Spec,
    Data,
    Numeric,
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Context { source, .. } => source.kind(),
            Error::Spec(_)
            | Error::Parameter(_)
            | Error::ColorSpaceTag { .. }
            | Error::WeightFormat(_)
            | Error::Json(_) => ErrorKind::Spec,
            Error::NonFinite(_)
            | Error::Numeric(_)
            | Error::Divergence(_)
            | Error::Tolerance(_)
            | Error::Shape(_)
            | Error::Contract(_)
            | Error::State(_) => ErrorKind::Numeric,
            Error::Layout(_)
            | Error::Balance(_)
            | Error::Capacity(_)
            | Error::Label(_)
            | Error::Input(_)
            | Error::Degenerate(_)
            | Error::Decode { .. }
            | Error::MissingFile(_)
            | Error::Csv(_)
            | Error::Io(_) => ErrorKind::Data,
        }
    }

    /// Process exit code: 2 spec error, 3 data error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Spec => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}
