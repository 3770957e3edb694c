use thiserror::Error;

/// Error type shared by the whole pipeline.
#[derive(Debug, Error)]
pub enum VentError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("feature `{feature}` has no observed value in the training split")]
    FeatureAllMissing { feature: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {message}")]
    Csv { path: String, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl VentError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        VentError::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        VentError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        VentError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        VentError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for VentError {
    fn from(e: serde_json::Error) -> Self {
        VentError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, VentError>;
