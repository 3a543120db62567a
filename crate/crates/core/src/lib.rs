//! Trust-region optimization of objectives governed by large nonlinear
//! systems of equations, accelerated by reduced-order models that are
//! hyperreduced on the fly.
//!
//! The crate is organized around an unassembled view of the governing
//! system: global residuals, Jacobians, and quantities of interest are sums
//! of per-element contributions ([`system::UnassembledSystem`]). That
//! structure is what makes hyperreduction possible — a nonnegative weight
//! vector over elements, trained by a linear program ([`eqp`]), replaces the
//! full element sum with a sparse one so reduced models can be assembled by
//! touching only a few elements.
//!
//! The optimization driver ([`trust_region::run_eqp_tr`]) rebuilds the
//! reduced basis and retrains the weights at every trust-region center, with
//! weight tolerances tied to the trust-region convergence test so the
//! iteration converges to a critical point of the *unreduced* problem.
//!
//! Element loops are data-parallel (rayon) when the `parallel` feature is
//! enabled (default); reductions are ordered by element index so results are
//! bit-identical to the sequential fallback.

pub mod assembly;
pub mod basis;
pub mod driver;
pub mod eqp;
pub mod linalg;
pub mod lp;
pub mod meshmotion;
pub mod newton;
pub mod problems;
pub mod rom;
pub mod system;
pub mod trust_region;

use thiserror::Error;

/// Errors produced by the numerical kernels and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented dimension or precondition contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An element callback produced a NaN or infinity.
    #[error("non-finite {quantity} in element {element}")]
    NonFiniteElement {
        /// Which element quantity misbehaved.
        quantity: &'static str,
        /// Index of the offending element.
        element: usize,
    },
    /// A nonlinear solve ran out of iterations.
    #[error("solver failed to converge after {iterations} iterations (residual norm {residual:.3e})")]
    Nonconvergence {
        /// Iterations performed before giving up.
        iterations: usize,
        /// Residual norm at the last iterate.
        residual: f64,
    },
    /// A matrix factorization broke down.
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
    /// The weight-training linear program reported infeasibility, which the
    /// all-ones feasible point rules out for well-formed inputs.
    #[error("EQP training LP unexpectedly infeasible: {0}")]
    LpInfeasible(String),
    /// The optimizer stalled (for example, repeated subproblem failures at
    /// the minimum trust-region radius).
    #[error("optimizer stalled: {0}")]
    OptimizerStalled(String),
    /// Filesystem or formatting error while writing results.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
