use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a scalar tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("attention mask row {row} has no allowed entry")]
    DegenerateMask { row: usize },
    #[error("model function is not deterministic: repeated evaluation gave {first} then {second}")]
    Determinism { first: f64, second: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u64,
        expected: u64,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for user-facing validation failures (bad config, bad file) as
    /// opposed to failures that happen mid-computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Parse { .. }
                | Error::Version { .. }
                | Error::Mismatch(_)
                | Error::DuplicateParameter(_)
        )
    }
}
