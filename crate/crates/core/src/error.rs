use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("unknown architecture family `{0}`")]
    UnknownFamily(String),

    #[error("no layer named `{0}`")]
    NoSuchLayer(String),

    #[error("layer `{name}`: {source}")]
    Layer {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short category tag used for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Unsupported(_) => "unsupported",
            Error::InsufficientData { .. } => "data",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::UnknownFamily(_) | Error::NoSuchLayer(_) => "lookup",
            Error::Layer { source, .. } => source.category(),
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "config",
            Error::Csv(_) => "io",
        }
    }

    pub(crate) fn in_layer(self, name: &str) -> Error {
        Error::Layer {
            name: name.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Error {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
