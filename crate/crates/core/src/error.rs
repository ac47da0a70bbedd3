use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("eigensolver failed to converge")]
    EigenNoConvergence,

    #[error("Matsubara frequency {k} coincides with the bath dissipation rate ({rate} cm⁻¹)")]
    DegenerateMatsubara { k: usize, rate: f64 },

    #[error("hierarchy with {n_modes} modes at depth {depth} needs {count} ADOs (cap {cap})")]
    HierarchyTooLarge { n_modes: usize, depth: usize, count: u128, cap: usize },

    #[error("numerical instability at t = {time_fs:.3} fs: {reason}")]
    Instability { time_fs: f64, reason: String },

    #[error("steady state not reached within {t_end_ps:.3} ps; extend the run")]
    SteadyStateNotReached { t_end_ps: f64 },

    #[error("instance too large for the dense oracle: {0}")]
    OracleTooLarge(String),

    #[error("oracle requires a closed system (eta = 0), got eta = {0} cm⁻¹")]
    OracleNeedsClosedSystem(f64),

    #[error("malformed trace file: {0}")]
    TraceFormat(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
