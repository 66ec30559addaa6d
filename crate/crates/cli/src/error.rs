use thiserror::Error;

use mtp_core::eval::EvalError;
use mtp_core::grad::CheckpointError;
use mtp_core::model::ModelError;
use mtp_core::raster::RasterError;
use mtp_core::scenegen::{DatasetError, SceneError};
use mtp_core::train::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Incompatible(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Incompatible(_) => 5,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::FormatVersionMismatch { .. } | DatasetError::ShapeMismatch { .. } => {
                CliError::Incompatible(e.to_string())
            }
            _ => CliError::Io(format!("dataset: {e}")),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Missing(_) => CliError::Incompatible(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(c) => c.into(),
            ModelError::InvalidConfig(msg) => CliError::Usage(format!("model config: {msg}")),
            other => CliError::Incompatible(other.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Usage(format!("scenario: {e}"))
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::Io(msg) => CliError::Io(msg),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Parse { .. } | EvalError::Schema(_) => CliError::Usage(e.to_string()),
            EvalError::CountMismatch { .. } | EvalError::TooFewModes { .. } => CliError::Incompatible(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { step, last_finite } => CliError::Numerical(match last_finite {
                Some((s, loss)) => format!("non-finite loss at step {step}; last finite step {s} with loss {loss}"),
                None => format!("non-finite loss at step {step}; no finite step recorded"),
            }),
            TrainError::InvalidConfig(msg) => CliError::Usage(format!("training config: {msg}")),
            TrainError::Incompatible(msg) => CliError::Incompatible(msg),
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Eval(e) => e.into(),
            TrainError::EmptyDataset => CliError::Usage("training set is empty".into()),
            other => CliError::Incompatible(other.to_string()),
        }
    }
}
