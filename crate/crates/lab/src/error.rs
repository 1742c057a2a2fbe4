use std::path::PathBuf;

use freeu_core::freeu::FieldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {}", format_fields(.0))]
    Config(Vec<FieldError>),
    #[error("cannot parse {what}: {message}")]
    Parse { what: String, message: String },
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("malformed container: {0}")]
    Container(String),
    #[error("training diverged at step {step}; last good checkpoint kept at {}", .checkpoint.display())]
    TrainingDiverged { step: u64, checkpoint: PathBuf },
    #[error(transparent)]
    Core(#[from] freeu_core::Error),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

fn format_fields(errs: &[FieldError]) -> String {
    errs.iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl LabError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Parse { .. } => 2,
            LabError::TrainingDiverged { .. } => 3,
            LabError::Core(e) => match e {
                freeu_core::Error::NonFinite { .. }
                | freeu_core::Error::SamplingDiverged { .. }
                | freeu_core::Error::ImaginaryResidue { .. } => 3,
                _ => 2,
            },
            _ => 1,
        }
    }
}
