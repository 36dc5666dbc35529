use std::path::PathBuf;

use vtgan_core::data::DataError;
use vtgan_core::eval::EvalError;
use vtgan_core::forest::ForestError;
use vtgan_core::models::ModelError;
use vtgan_core::scoring::ScoreError;
use vtgan_core::tensor::TensorError;
use vtgan_core::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Eval(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Integrity(_) => 5,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Tensor(t) => t.into(),
            ModelError::Integrity(_) => CliError::Integrity(e.to_string()),
            ModelError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Hook(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::Config(_) => CliError::Usage(e.to_string()),
            ScoreError::Model(m) => m.into(),
            ScoreError::AllRestartsFailed { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::Input(_) => CliError::Data(e.to_string()),
            ForestError::Dimension { .. } => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pgm(_) => CliError::Data(e.to_string()),
            _ => CliError::Eval(e.to_string()),
        }
    }
}
