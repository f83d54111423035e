//! Error taxonomy shared by every stage of the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IlmError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("dependency error: missing output of stage `{stage}`; run it first")]
    Dependency { stage: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl IlmError {
    /// Stable category tag used in CLI error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            IlmError::Dimension(_) => "dimension",
            IlmError::DegenerateInput(_) => "degenerate-input",
            IlmError::NonFinite { .. } => "non-finite",
            IlmError::Vocabulary(_) => "vocabulary",
            IlmError::Usage(_) => "usage",
            IlmError::Numerical(_) => "numerical",
            IlmError::Parse { .. } => "parse",
            IlmError::Catalog(_) => "catalog",
            IlmError::Template(_) => "template",
            IlmError::Storage(_) => "storage",
            IlmError::Dependency { .. } => "dependency",
            IlmError::Config(_) => "config",
            IlmError::Checkpoint(_) => "checkpoint",
        }
    }
}

impl From<std::io::Error> for IlmError {
    fn from(e: std::io::Error) -> Self {
        IlmError::Storage(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, IlmError>;
