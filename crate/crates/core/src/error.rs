use thiserror::Error;

/// Errors raised across the co-design toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("degenerate detuning: qubit frequencies coincide ({0} rad/ns)")]
    DegenerateDetuning(f64),

    #[error("pole in effective interaction: {0}")]
    Pole(String),

    #[error("value out of bounds: {name} = {value} not in [{lo}, {hi}]")]
    OutOfBounds {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("unknown parameter `{0}`")]
    UnknownName(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
