use thiserror::Error;

/// Errors produced across the crate. The CLI maps these onto distinct
/// process exit codes (config = 2, data = 3, training = 4).
#[derive(Debug, Error)]
pub enum FinError {
    #[error("input out of domain: {0}")]
    InputDomain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FinError>;
