use thiserror::Error;

/// Errors raised by the geometry, normalization, operator, bridge and
/// spectral routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{context}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{context}: matrix must be square, found {rows}x{cols}")]
    NotSquare {
        context: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),

    /// An iterative solver stopped at `max_iter` without reaching `tol`.
    /// The residual actually achieved is carried along.
    #[error("{solver} did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("stochastic kinds differ: {0:?} vs {1:?}")]
    KindMismatch(crate::normalize::Stochasticity, crate::normalize::Stochasticity),

    #[error("product of experts has a vanishing {axis} at index {index}")]
    DisjointSupport { axis: &'static str, index: usize },

    #[error("phase field is not antisymmetric (max |theta + theta^T| = {0:e})")]
    NotAntisymmetric(f64),

    #[error("detailed balance violated (max |pi_i p_ij - pi_j p_ji| = {0:e})")]
    DetailedBalance(f64),

    #[error("eigensolver failed to converge")]
    EigenFailure,
}

pub type Result<T> = std::result::Result<T, Error>;
