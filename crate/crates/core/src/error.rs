use thiserror::Error;

use crate::nlp::SolverError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("scenario generation failed after {0} attempts")]
    Generation(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
