use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: missing field `{field}`")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: &'static str,
    },
    #[error("duplicate identity (subject `{subject_id}`, sample `{sample_id}`)")]
    DuplicateIdentity {
        subject_id: String,
        sample_id: String,
    },
    #[error("degenerate landmark configuration: {0}")]
    DegenerateLandmarks(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("extractor mismatch: {0}")]
    ExtractorMismatch(String),
    #[error("zero-norm template")]
    ZeroVector,
    #[error("non-finite loss {loss} at step {step}")]
    Diverged { step: u64, loss: f64 },
    #[error("insufficient impostor scores: {have} scores cannot resolve FAR {far}")]
    InsufficientImpostors { have: usize, far: f64 },
    #[error("target covariance {target} for pair ({i}, {j}) is outside the attainable range [{min}, {max}]")]
    Infeasible {
        i: usize,
        j: usize,
        target: f64,
        min: f64,
        max: f64,
    },
    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
