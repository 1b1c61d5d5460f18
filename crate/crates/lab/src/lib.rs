//! Experiment orchestration: airframe sampling, library campaigns, the transfer
//! studies and their reports.

pub mod campaign;
pub mod cli;
pub mod report;
pub mod sampling;
pub mod stats;

use thiserror::Error;

use rotorlab::airframe::AirframeError;
use rotorlab::alloc::AllocError;
use rotorlab::rl::RlError;
use rotorlab::transfer::TransferError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("no feasible sample after {0} attempts")]
    SamplingExhausted(usize),
    #[error("need at least 5 paired points, got {0}")]
    InsufficientData(usize),
    #[error(transparent)]
    Airframe(#[from] AirframeError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    /// Process exit code: 2 for bad input, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_) | LabError::Json(_) => 2,
            _ => 3,
        }
    }
}
