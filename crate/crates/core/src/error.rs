use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the function being evaluated.
    #[error("domain error: {0}")]
    Domain(String),
    /// A structural hypothesis of the theory (e.g. `d1 > d4`) does not hold.
    #[error("regime error: {0}")]
    Regime(String),
    /// A tuning parameter (k, l, eps, c, ...) is outside its admissible window.
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("validation error: {0}")]
    Validation(String),
    /// Numerical evidence was insufficient to decide convergence.
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn ensure(cond: bool, err: impl FnOnce() -> Error) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(err())
    }
}
