use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation in {context}: {message}")]
    Schema { context: String, message: String },
    #[error("record {record} references unknown stimulus `{stimulus_id}`")]
    DanglingStimulus { record: String, stimulus_id: String },
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("missing region of interest `{0}`")]
    MissingRoi(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("zero variance in {0}, correlation undefined")]
    ZeroVariance(&'static str),
    #[error("step {t} out of range for schedule of length {len}")]
    StepOutOfRange { t: usize, len: usize },
    #[error("missing payload for enabled guidance level `{0}`")]
    MissingGuidance(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Process exit status for the CLI: 2 for validation failures, 3 for
    /// everything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Schema { .. } => 2,
            Error::DanglingStimulus { .. } | Error::MissingRoi(_) | Error::MissingGuidance(_) => 2,
            _ => 3,
        }
    }
}
