use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("representation error: {0}")]
    Representation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("symbol error: {0}")]
    Symbol(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("singular kernel: {0}")]
    Singularity(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("exponent error: {0}")]
    Exponent(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("wraparound error: {0}")]
    Wraparound(String),
    #[error("span error: {0}")]
    Span(String),
    #[error("divergence: {message}")]
    Divergence { message: String, history: Vec<f64> },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
