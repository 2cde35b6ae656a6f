use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the distillation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid model spec `{spec}`: {reason}")]
    ModelSpec { spec: String, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch_norm2d in eval mode needs initialized running statistics")]
    UninitializedRunningStats,

    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupt dataset file {}: {detail}", .path.display())]
    CorruptDataset { path: PathBuf, detail: String },

    #[error("checkpoint {}: {detail}", .path.display())]
    Checkpoint { path: PathBuf, detail: String },

    #[error("training diverged at epoch {epoch} (loss {loss}); last good epoch: {last_good:?}")]
    Diverged {
        epoch: usize,
        loss: f64,
        last_good: Option<usize>,
    },

    #[error("teacher parameters changed during distillation (epoch {epoch})")]
    TeacherModified { epoch: usize },

    #[error("oracle input too large: {0} output elements exceeds the cap")]
    OracleCap(usize),

    #[error("non-finite function value during finite differences at coordinate {0}")]
    NonFinite(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
