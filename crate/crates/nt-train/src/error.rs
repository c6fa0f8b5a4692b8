use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Model(#[from] nt_model::ModelError),
    #[error(transparent)]
    Tensor(#[from] nt_core::TensorError),
    #[error("dataset: {0}")]
    Mmud(#[from] nt_mmud::MmudError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// Process exit code contract: 2 config, 3 missing input, 4 incompatible
    /// artifacts, 5 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) | TrainError::Json(_) => 2,
            TrainError::MissingInput(_) => 3,
            TrainError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            TrainError::Mmud(nt_mmud::MmudError::Io(e))
                if e.kind() == std::io::ErrorKind::NotFound =>
            {
                3
            }
            TrainError::Mmud(_) => 4,
            TrainError::Incompatible(_) => 4,
            TrainError::Numerical(_) => 5,
            TrainError::Model(nt_model::ModelError::Diverged(_)) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;
