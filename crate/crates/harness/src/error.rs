use soaheap::{AllocError, AuditError};
use soaheap_apps::AppError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    OutOfMemory(AllocError),
    #[error("app: {0}")]
    App(AppError),
    #[error("audit failed after iteration {iteration}: {source}")]
    Audit { iteration: usize, source: AuditError },
    #[error("audit failed after iteration {iteration}: {source}")]
    Invariant { iteration: usize, source: AppError },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("metrics: {0}")]
    Metrics(String),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::OutOfMemory(_) => 3,
            HarnessError::App(_) => 4,
            HarnessError::Audit { .. } | HarnessError::Invariant { .. } => 5,
            HarnessError::Io(_) | HarnessError::Csv(_) | HarnessError::Json(_) | HarnessError::Metrics(_) => 1,
        }
    }
}

impl From<AppError> for HarnessError {
    fn from(e: AppError) -> Self {
        match e {
            AppError::Alloc(a @ AllocError::OutOfMemory { .. }) => HarnessError::OutOfMemory(a),
            AppError::Params(m) => HarnessError::Config(m),
            AppError::Registry(r) => HarnessError::Config(r.to_string()),
            AppError::Pattern(p) => HarnessError::Config(p.to_string()),
            e => HarnessError::App(e),
        }
    }
}
