use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    Dimension {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid MDP row (state {state}, action {action}): {reason}")]
    InvalidRow {
        state: usize,
        action: usize,
        reason: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("compressor input out of bound: coordinate {coordinate} has value {value} but the bound is {bound}")]
    OutOfBound {
        coordinate: usize,
        value: f64,
        bound: f64,
    },

    #[error("quantizer level index {index} out of range (levels = {levels})")]
    InvalidLevel { index: u64, levels: u64 },

    #[error("sample matrix entry ({state}, {action}) points to state {next} outside the state space")]
    InvalidStateIndex {
        state: usize,
        action: usize,
        next: usize,
    },

    #[error("epoch {epoch}, round {round}: {source}")]
    Epoch {
        epoch: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True when this error (or the error it wraps) is a quantizer bound violation.
    pub fn is_out_of_bound(&self) -> bool {
        match self {
            Error::OutOfBound { .. } => true,
            Error::Epoch { source, .. } => source.is_out_of_bound(),
            _ => false,
        }
    }

    /// True for input-validation failures (bad MDP files, bad configs, bad parameters).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::InvalidMdp(_)
                | Error::InvalidRow { .. }
                | Error::InvalidParameter { .. }
                | Error::Config(_)
                | Error::Json(_)
                | Error::Empty(_)
        )
    }
}
