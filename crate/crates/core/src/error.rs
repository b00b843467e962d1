use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed PLY header at line {line}: {message} (`{text}`)")]
    Parse {
        line: usize,
        text: String,
        message: String,
    },

    #[error("missing required property `{0}`")]
    Schema(String),

    #[error("invalid data for primitive {index}: {message}")]
    Data { index: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// The auxiliary graph split into several components; sizes are listed.
    Connectivity { component_sizes: Vec<usize> },
    /// A free component had no handle; its positions were fixed up to translation.
    SingularSystem { component_size: usize },
    /// A Gaussian could reach fewer than the requested number of control nodes.
    Binding { gaussian: usize, neighbors: usize },
    /// Blended quaternion cancelled out; the dominant neighbor was used.
    DegenerateBlend { gaussian: usize },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::Connectivity { component_sizes } => {
                write!(f, "auxiliary graph is disconnected, component sizes {component_sizes:?}")
            }
            Warning::SingularSystem { component_size } => write!(
                f,
                "free component of {component_size} nodes has no handle, using pseudo-solution"
            ),
            Warning::Binding { gaussian, neighbors } => write!(
                f,
                "gaussian {gaussian} bound to only {neighbors} reachable control nodes"
            ),
            Warning::DegenerateBlend { gaussian } => {
                write!(f, "gaussian {gaussian}: blended rotation cancelled, using dominant neighbor")
            }
        }
    }
}
