use std::fmt;
use std::path::Path;

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Degenerate(String),
    Evaluation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Degenerate(_) => 4,
            CliError::Evaluation(_) => 5,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    /// Classifies an error raised while reading an input file.
    pub fn input(path: &Path, err: meterflow::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    /// Classifies an error raised by a computation.
    pub fn run(err: meterflow::Error) -> Self {
        use meterflow::Error as E;
        match err {
            E::Degenerate { .. } | E::NoAcceptance { .. } => CliError::Degenerate(err.to_string()),
            E::ZeroOverlap | E::Coverage { .. } => CliError::Evaluation(err.to_string()),
            E::Io(_) | E::Csv(_) | E::Rows(_) => CliError::Io(err.to_string()),
            _ => CliError::Config(err.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Degenerate(m) => write!(f, "inference failed: {m}"),
            CliError::Evaluation(m) => write!(f, "evaluation failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;
