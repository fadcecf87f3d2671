use thiserror::Error;

/// A single rejected row from a CSV input.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: &'static str, reason: String },

    #[error("{what} #{index} must be a positive duration, got {value}")]
    NonPositiveDuration {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("sample path entry {index} is inconsistent: {reason}")]
    InvalidPath { index: usize, reason: String },

    #[error("time {time} is earlier than the previous event at {previous}")]
    TimeOrder { time: f64, previous: f64 },

    #[error("weights are not normalized (sum = {sum})")]
    Unnormalized { sum: f64 },

    #[error("all particle weights vanished at step {step}")]
    Degenerate { step: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no acceptance after {iterations} iterations")]
    NoAcceptance { iterations: usize },

    #[error("no payment rate defined at {time}")]
    MissingRate { time: String },

    #[error("no overlap between estimate and ground truth")]
    ZeroOverlap,

    #[error("evaluation grid has a gap of {gap:.2} min starting at {start:.2}")]
    Coverage { start: f64, gap: f64 },

    #[error("malformed rows: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Rows(Vec<RowError>),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidValue {
        field,
        reason: reason.into(),
    }
}
