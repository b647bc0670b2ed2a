use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrispError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate concentration: mean resultant length {0} is too close to 1")]
    DegenerateConcentration(f64),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("empty foreground: {0}")]
    EmptyForeground(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CrispError> = std::result::Result<T, E>;
