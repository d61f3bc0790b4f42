use thiserror::Error;

pub type Result<T> = std::result::Result<T, SlaError>;

#[derive(Debug, Error)]
pub enum SlaError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("class {class} has no members and no fallback center")]
    EmptyClass { class: usize },
    #[error("task generation failed: {0}")]
    Generation(String),
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("load error: {0}")]
    Load(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SlaError::Shape { expected, got })
    }
}
