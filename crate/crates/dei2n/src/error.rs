use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// data problems (bad files, malformed records) exit 3, numerical problems
/// (shape mismatches, divergence, undefined metrics) exit 4.
#[derive(Error, Debug)]
pub enum Error {
    /// An operation was given tensors whose shapes do not combine.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument outside the operation's domain (dropout rate >= 1,
    /// backward from a non-scalar, bad config values, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A masked softmax row with no unmasked entries. Callers are expected
    /// to branch on empty sequences before reaching the softmax.
    #[error("empty attention row: row {row} has no unmasked entries")]
    EmptyAttentionRow { row: usize },

    /// A dataset file failed validation. `line` is 1-based when the problem
    /// is tied to a specific record.
    #[error("data error{}: {detail}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, detail: String },

    /// A metric has no defined value on the given input (e.g. AUC on a
    /// single-class label set, RelaImpr against a random baseline).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training hit a non-finite loss. Carries enough context to locate the
    /// offending step.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// A checkpoint file that cannot be parsed or fails its version check.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn data(line: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Data {
            line,
            detail: detail.into(),
        }
    }
}
