//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the physics kernels, the solver and the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("self-coupling requested")]
    SelfCoupling,
    #[error("not subwavelength: {0}")]
    NotSubwavelength(String),
    #[error("order not evanescent: ({0}, {1})")]
    OrderNotEvanescent(i64, i64),
    #[error("near-divergent regime excluded: dy = {0}")]
    NearDivergent(f64),
    #[error("branch unreachable for these lattice constants: dx = {dx}, dy = {dy}")]
    BranchUnreachable { dx: f64, dy: f64 },
    #[error("lattice sum did not converge (residual {0:e})")]
    SumNotConverged(f64),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("memory budget exceeded: need {needed} bytes, budget {budget} bytes")]
    MemoryBudget { needed: u64, budget: u64 },
    #[error("fully scrambled: mean reflection vanishes")]
    FullyScrambled,
    #[error("point coincides with an emitter")]
    OnEmitter,
    #[error("pairwise distance audit failed: {0}")]
    DistanceAudit(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 for configuration errors, 3 for resource
    /// refusals, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MemoryBudget { .. } => 3,
            Error::Invalid(_)
            | Error::SelfCoupling
            | Error::NotSubwavelength(_)
            | Error::OrderNotEvanescent(..)
            | Error::NearDivergent(_)
            | Error::BranchUnreachable { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::SumNotConverged(_)
            | Error::Singular(_)
            | Error::FullyScrambled
            | Error::OnEmitter
            | Error::DistanceAudit(_) => 4,
        }
    }
}
