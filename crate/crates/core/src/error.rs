use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HrstError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HrstError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A container failed validation; `field` names the header field that was wrong.
    #[error("format error in field `{field}`: {message}")]
    Format {
        field: &'static str,
        message: String,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("crop error: {0}")]
    Crop(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),
}

impl HrstError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HrstError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: &'static str, message: impl Into<String>) -> Self {
        HrstError::Format {
            field,
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than data or numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HrstError::Config(_)
                | HrstError::Dimension(_)
                | HrstError::Shape(_)
                | HrstError::Topology(_)
                | HrstError::Crop(_)
                | HrstError::Mapping(_)
        )
    }
}
