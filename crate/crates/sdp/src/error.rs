use thiserror::Error;

/// Failure modes of problem validation and the interior-point iteration.
#[derive(Debug, Error)]
pub enum SdpError {
    /// Problem data is malformed: out-of-range indices, non-Hermitian
    /// matrices, dimension mismatches, or a block above the size cap.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    /// The equality system `A y = b` has no solution, or the iterates
    /// diverged in a pattern consistent with an empty feasible set.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The objective appears unbounded above on the feasible set.
    #[error("unbounded: objective exceeded {0:.3e} without closing the gap")]
    Unbounded(f64),

    /// A Cholesky factorization failed even after diagonal regularization.
    /// Usually means the problem is so ill-conditioned that no further
    /// progress is possible at f64 precision.
    #[error("ill-conditioned at iteration {iteration}: {detail}")]
    IllConditioned { iteration: usize, detail: String },

    /// Iteration budget exhausted before reaching the requested tolerances.
    /// The partially converged gap is reported for diagnostics.
    #[error("no convergence after {iterations} iterations (relative gap {gap:.3e})")]
    MaxIterations { iterations: usize, gap: f64 },
}
