use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numerical divergence in {context} at step {step}")]
    Divergence { context: String, step: usize },

    #[error("unknown {kind} {id}")]
    Lookup { kind: &'static str, id: usize },

    #[error("format error at line {line}: {detail}")]
    Format { line: usize, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn format(line: usize, detail: impl Into<String>) -> Self {
        Error::Format { line, detail: detail.into() }
    }
}
