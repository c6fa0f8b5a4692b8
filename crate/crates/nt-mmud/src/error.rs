use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmudError {
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: malformed json: {source}")]
    Json { file: String, line: usize, source: serde_json::Error },
    #[error("{file}:{line}: field {field}: {message}")]
    Validation { file: String, line: usize, field: &'static str, message: String },
    #[error("{file}: {message}")]
    Manifest { file: String, message: String },
}
