use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the engine.
///
/// The variant names double as the error class reported by the command line.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("length error: sequence of {len} exceeds context of {max}")]
    Length { len: usize, max: usize },
    #[error("tokenization error: unknown word {0:?}")]
    Tokenize(String),
}

impl Error {
    /// Short stable name of the error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "DimensionError",
            Error::Parameter(_) => "ParameterError",
            Error::Numeric(_) => "NumericError",
            Error::Contract(_) => "ContractError",
            Error::Config(_) => "ConfigError",
            Error::Length { .. } => "LengthError",
            Error::Tokenize(_) => "TokenizationError",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
