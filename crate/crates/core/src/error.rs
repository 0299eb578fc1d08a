use thiserror::Error;

use crate::abse::IterationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rate matrix: {0}")]
    InvalidRateMatrix(String),

    #[error("state index {state} out of range for {n_states} states")]
    InvalidState { state: usize, n_states: usize },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix not symmetric: asymmetry {deviation:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { deviation: f64, tol: f64 },

    #[error("seminorm trace {trace:.3e} below -{tol:.3e}: Psi is not positive semidefinite")]
    NegativeSeminorm { trace: f64, tol: f64 },

    #[error("numerical failure in {context} at t = {t}, state {state}")]
    Numerical { context: String, t: f64, state: usize },

    #[error("delay hypothesis violated: {0}")]
    DelayHypothesis(String),

    #[error(
        "Picard iteration did not converge within {max_iter} sweeps (last diff {last_diff:.3e})"
    )]
    NoConvergence {
        max_iter: usize,
        last_diff: f64,
        report: IterationReport,
    },

    #[error("need at least {needed} recorded iterations, got {got}")]
    TooFewIterations { needed: usize, got: usize },

    #[error("comparison instance rejected: {0}")]
    Rejected(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
