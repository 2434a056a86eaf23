//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Malformed input file (CSV syntax, empty file, missing header).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A value could not be interpreted with the required type.
    #[error("type error at line {line}, column `{column}`: {msg}")]
    Type {
        line: usize,
        column: String,
        msg: String,
    },

    /// The panel structure is inconsistent (e.g. duplicate (unit, time) pairs).
    #[error("structural error: {0}")]
    Structure(String),

    /// A referenced variable does not exist.
    #[error("unknown variable: {0}")]
    Name(String),

    /// The model specification is inconsistent (role overlap, bad counts, ...).
    #[error("specification error: {0}")]
    Spec(String),

    /// Supplied parameters or arguments violate their invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// The design matrix is rank deficient on the support of positive weights.
    #[error("singular design: columns {} are not identified", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    /// A weighted problem has no usable rows (all weights zero).
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    /// A numerical failure during estimation, with (unit, time) context when known.
    #[error("numerical error{}: {msg}", fmt_ctx(.unit, .time))]
    Numerical {
        unit: Option<String>,
        time: Option<usize>,
        msg: String,
    },

    /// All bootstrap replicates failed.
    #[error("bootstrap failure: {0}")]
    Bootstrap(String),

    /// The model search produced no usable cell.
    #[error("search failure: {0}")]
    Search(String),

    /// An enumeration guard was exceeded.
    #[error("size error: {0}")]
    Size(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical {
            unit: None,
            time: None,
            msg: msg.into(),
        }
    }
}

fn fmt_ctx(unit: &Option<String>, time: &Option<usize>) -> String {
    match (unit, time) {
        (Some(u), Some(t)) => format!(" (unit {u}, time {t})"),
        (Some(u), None) => format!(" (unit {u})"),
        _ => String::new(),
    }
}
