use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input buffer")]
    EmptyInput,
    #[error("position id {position} out of range (max_position = {max_position})")]
    PositionOutOfRange { position: usize, max_position: usize },
    #[error("token id {token} out of range (vocab_size = {vocab_size})")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("position id {0} already present in the cache")]
    PositionCollision(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("input too large for brute-force enumeration: {0}")]
    Size(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint {path} is corrupt: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
