//! Experiment harness for the learned solvers: dataset caching, per-cell
//! training and evaluation, reference solves and report tables.

pub mod config;
pub mod experiment;
pub mod report;

use dc3::acopf::CaseError;
use dc3::dc3::EngineError;
use dc3::family::FamilyError;
use dc3::nn::NnError;
use dc3::reference::SolverError;
use dc3::tensor::TensorError;
use dc3::tensor_io::TensorFileError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error("case: {0}")]
    Case(#[from] CaseError),
    #[error("reference solver: {0}")]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0} cell(s) failed")]
    CellsFailed(usize),
}
