use std::path::PathBuf;

use thiserror::Error;

/// Error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated while reading record {record}")]
    Truncated { record: usize },
    #[error("non-finite value in sample {sample_id} ({field})")]
    NonFinite { sample_id: u64, field: &'static str },
    #[error("header field {field} overflows: {value}")]
    HeaderOverflow { field: &'static str, value: usize },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("length mismatch: {left_name} has {left} entries, {right_name} has {right}")]
    LengthMismatch { left_name: &'static str, left: usize, right_name: &'static str, right: usize },
    #[error("infeasible synthetic layout: {0}")]
    Infeasible(String),
    #[error("sinkhorn: column {column} is all zero after clamping")]
    ZeroColumn { column: usize },
    #[error("class {class} has zero total weight after fallback")]
    ZeroClassWeight { class: usize },
    #[error("need at least {needed} points for {what}, got {got}")]
    TooFewPoints { what: &'static str, needed: usize, got: usize },
    #[error("mixture component {component} collapsed twice")]
    ComponentCollapse { component: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by arithmetic breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::Diverged { .. }
                | Error::ComponentCollapse { .. }
                | Error::ZeroColumn { .. }
                | Error::ZeroClassWeight { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
