use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped by the process exit code the
/// CLI maps them to: missing inputs (2), configuration violations (3), and
/// everything else (1). Gradient-check failures are not errors; the CLI
/// inspects the report and exits 4 itself.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(
        "{op}: dimension mismatch between {} and {}",
        fmt_shape(lhs),
        fmt_shape(rhs)
    )]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of bounds for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{0}")]
    Domain(String),

    #[error("{0}")]
    Validation(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing input file: {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

pub type Result<T> = std::result::Result<T, Error>;
