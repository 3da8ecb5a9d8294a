use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite gradient in layer {layer}")]
    NonFinite { layer: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("wrong policy kind: expected {expected}, got {actual}")]
    Kind {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("tokenization error: action component {0} outside [-1, 1]")]
    Tokenization(f64),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("schema mismatch in: {}", .0.join(", "))]
    Schema(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
