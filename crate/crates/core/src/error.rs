use thiserror::Error;

/// Errors raised by the estimators and their supporting numerics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmError {
    /// Caller broke an input contract (shapes, finiteness, parameter ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular scatter matrix (min eigenvalue {min_eig:e}, max eigenvalue {max_eig:e})")]
    SingularScatter { min_eig: f64, max_eig: f64 },

    /// The weighted design does not have full column rank.
    #[error("rank-deficient design: numerical rank {rank} of {expected} columns")]
    RankDeficient { rank: usize, expected: usize },

    #[error("all observation weights are zero")]
    NoSupport,

    #[error("degenerate rho kernel: {0}")]
    DegenerateKernel(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("problem too large for exact enumeration: n = {n} exceeds limit {limit}; use breakdown_lower_bound with a known k_n")]
    TooLarge { n: usize, limit: usize },

    /// More replications failed than the aggregation tolerates.
    #[error("{failed} of {total} replications failed")]
    ReplicationFailures { failed: usize, total: usize },
}

impl MmError {
    /// Short machine-readable code for CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            MmError::Contract(_) => "contract_violation",
            MmError::SingularScatter { .. } => "singular_scatter",
            MmError::RankDeficient { .. } => "rank_deficient",
            MmError::NoSupport => "no_support",
            MmError::DegenerateKernel(_) => "degenerate_kernel",
            MmError::DegenerateData(_) => "degenerate_data",
            MmError::TooLarge { .. } => "too_large",
            MmError::ReplicationFailures { .. } => "replication_failures",
        }
    }
}

pub type Result<T> = std::result::Result<T, MmError>;
