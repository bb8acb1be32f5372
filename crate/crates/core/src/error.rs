use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum DpkError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("need at least {min} examples per batch, got {n}")]
    BatchTooSmall { n: usize, min: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("teacher checkpoint not found at `{}` (train one with `dpk train`)", .0.display())]
    MissingTeacher(PathBuf),
    #[error("non-finite loss at step {step} (stage {stage}); tensors dumped to `{}`", .dump.display())]
    NonFiniteLoss { step: usize, stage: String, dump: PathBuf },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DpkError {
    /// Process exit status for the command line: 2 for validation problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DpkError::Config(_) | DpkError::Validation(_) => 2,
            _ => 3,
        }
    }
}

impl From<dpk_tensor::LoadError> for DpkError {
    fn from(e: dpk_tensor::LoadError) -> Self {
        DpkError::Format(e.to_string())
    }
}

pub type Result<T, E = DpkError> = std::result::Result<T, E>;
