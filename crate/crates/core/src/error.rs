use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("state error: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("insufficient attributes for class '{class}': have {have}, need {need}")]
    InsufficientAttributes { class: String, have: usize, need: usize },

    #[error("insufficient samples for class '{class}': have {have}, need {need}")]
    InsufficientSamples { class: String, have: usize, need: usize },

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    /// Every problem found while validating a run configuration.
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateVector { .. } => "degenerate_vector",
            Error::State(_) => "state",
            Error::NumericFailure(_) => "numeric_failure",
            Error::Unsupported(_) => "unsupported",
            Error::InsufficientAttributes { .. } => "insufficient_attributes",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::CorruptDataset(_) => "corrupt_dataset",
            Error::InvalidManifest(_) => "invalid_manifest",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_and_kinds() {
        let e = Error::InsufficientAttributes {
            class: "tulip".into(),
            have: 2,
            need: 4,
        };
        assert_eq!(e.kind(), "insufficient_attributes");
        assert_eq!(
            e.to_string(),
            "insufficient attributes for class 'tulip': have 2, need 4"
        );
        let e = Error::Config(vec!["a".into(), "b".into()]);
        assert_eq!(e.to_string(), "invalid config: a; b");
        let e = Error::io("/x/y", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert!(e.to_string().starts_with("/x/y: "));
        assert_eq!(e.kind(), "io");
    }
}
