//! Semidefinite programming over Hermitian matrix blocks.
//!
//! Solves problems of the form
//!
//! ```text
//! maximize    c0 + c . y                         (y real)
//! subject to  A y = b                            (dense equality rows)
//!             G0[k] + sum_i y[i] B[k][i] >= 0    (Hermitian PSD, each block k)
//! ```
//!
//! with a primal-dual interior-point method (HKM search direction, Mehrotra
//! predictor-corrector). The solver returns both a feasible `y` and the dual
//! matrices `Y[k] >= 0` plus equality multipliers, so callers can certify the
//! optimum independently: for any feasible `y'`,
//!
//! ```text
//! c . y'  <=  sum_k <G0[k], Y[k]> + b . nu
//! ```
//!
//! whenever `<B[k][i], Y[k]>` sums match the objective coefficients. The
//! duality gap reported in [`SdpSolution`] is the certified distance between
//! the two sides at exit.
//!
//! Everything is dense and single-threaded; the target regime is a few
//! hundred scalar variables over blocks of dimension at most 200, where a
//! factorization-based method is both faster and far more predictable than
//! first-order alternatives.

mod error;
mod problem;
mod solver;

pub use error::SdpError;
pub use problem::{Block, EqRow, SdpProblem, SparseHermitian, C64};
pub use solver::{InteriorPoint, SdpSolution, SolverOptions};
