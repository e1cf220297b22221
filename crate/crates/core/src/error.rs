use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: dimension {dim} expected {expected}, got {actual}")]
    Shape {
        context: String,
        dim: usize,
        expected: usize,
        actual: usize,
    },

    #[error("rank mismatch in {context}: expected rank {expected}, got {actual}")]
    Rank {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("finite-difference step underflows at parameter {index} (value {value:e})")]
    StepUnderflow { index: usize, value: f64 },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("invalid model spec: {0}")]
    Model(String),

    #[error("invalid label {label} (num_classes = {num_classes})")]
    Label { label: usize, num_classes: usize },

    #[error("invalid task definition: {0}")]
    Task(String),

    #[error("training diverged on task {task}, epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        task: usize,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for the CLI: 1 config, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Model(_)
            | Error::Task(_)
            | Error::Label { .. }
            | Error::Empty(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Shape { .. }
            | Error::Rank { .. }
            | Error::DataLength { .. }
            | Error::NonFinite { .. }
            | Error::StepUnderflow { .. }
            | Error::Layout(_)
            | Error::Divergence { .. } => 2,
        }
    }
}
