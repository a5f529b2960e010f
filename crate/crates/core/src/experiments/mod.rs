//! Desk-scale experiment drivers: shuffled-summation reproducibility
//! ([`ssh`]) and accumulator sweeps over a small neural network ([`ai`]),
//! with CSV/JSON reporting ([`report`]).

pub mod ai;
pub mod report;
pub mod ssh;

use thiserror::Error;

use crate::accumulator::AccumulatorError;
use crate::fdp::FdpError;
use crate::formats::FormatError;
use crate::gemm::GemmError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("model: {0}")]
    Model(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Accumulator(#[from] AccumulatorError),
    #[error(transparent)]
    Fdp(#[from] FdpError),
    #[error(transparent)]
    Gemm(#[from] GemmError),
}
