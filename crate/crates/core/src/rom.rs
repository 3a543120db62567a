//! Galerkin reduced-order quantities computed through the assembled route:
//! lift the reduced coordinates, assemble the full-order quantity, project.
//!
//! This is the algebraically equivalent twin of the element-sum route in
//! [`crate::eqp`] (with all weights one). Keeping both routes distinct gives
//! every reduced quantity an independent cross-check; the solvers here are
//! also what the full-order-limit and containment tests exercise.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{
    assemble_jacobian, assemble_param_jacobian, assemble_qoi, assemble_qoi_derivatives,
    assemble_residual,
};
use crate::basis::ReducedBasis;
use crate::eqp::REDUCED_NEWTON_TOL;
use crate::linalg::LuFactors;
use crate::system::{ParamVec, UnassembledSystem};
use crate::{Error, Result};

/// Reduced residual `r̂(y, mu) = Φ' r(lift(y), mu)`.
pub fn reduced_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    let u = basis.lift(y);
    Ok(basis.phi().transpose() * assemble_residual(sys, &u, mu)?)
}

/// Reduced Jacobian `Φ' (∂r/∂u) Φ`.
pub fn reduced_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DMatrix<f64>> {
    let u = basis.lift(y);
    let jac = assemble_jacobian(sys, &u, mu)?;
    let n = basis.dim();
    let mut j_phi = DMatrix::zeros(basis.num_dofs(), n);
    for j in 0..n {
        let col = DVector::from_column_slice(basis.phi().column(j).as_slice());
        j_phi.set_column(j, &jac.matvec(&col));
    }
    Ok(basis.phi().transpose() * j_phi)
}

/// Reduced QoI `ĵ(y, mu) = j(lift(y), mu)`.
pub fn reduced_qoi<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<f64> {
    assemble_qoi(sys, &basis.lift(y), mu)
}

/// Reduced QoI derivatives `(Φ' ∂j/∂u, ∂j/∂mu)`.
pub fn reduced_qoi_derivatives<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let u = basis.lift(y);
    let (gu, gmu) = assemble_qoi_derivatives(sys, &u, mu)?;
    Ok((basis.phi().transpose() * gu, gmu))
}

/// Reduced parameter Jacobian `Φ' ∂r/∂mu`.
pub fn reduced_param_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DMatrix<f64>> {
    let u = basis.lift(y);
    Ok(basis.phi().transpose() * assemble_param_jacobian(sys, &u, mu)?)
}

/// Reduced adjoint residual `Ĵ' z - Φ' (∂j/∂u)'` at `(z, y)`.
pub fn reduced_adjoint_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    z: &DVector<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    let jac = reduced_jacobian(sys, basis, y, mu)?;
    let (gy, _) = reduced_qoi_derivatives(sys, basis, y, mu)?;
    Ok(jac.transpose() * z - gy)
}

/// Newton solve of the reduced primal `r̂(y, mu) = 0` to absolute tolerance
/// [`REDUCED_NEWTON_TOL`].
pub fn rom_solve_primal<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    mu: &ParamVec,
    guess: &DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let mut y = guess.clone();
    let mut r = reduced_residual(sys, basis, &y, mu)?;
    let mut norm = r.norm();
    let max_iters = 50;
    for iter in 1..=max_iters {
        if norm <= REDUCED_NEWTON_TOL {
            return Ok((y, iter - 1));
        }
        let jac = reduced_jacobian(sys, basis, &y, mu)?;
        let step = LuFactors::new(jac)?.solve(&(-&r));
        let mut t = 1.0;
        let mut advanced = false;
        for _ in 0..25 {
            let cand = &y + &step * t;
            let cand_r = reduced_residual(sys, basis, &cand, mu)?;
            let cand_norm = cand_r.norm();
            if cand_norm.is_finite() && cand_norm < norm {
                y = cand;
                r = cand_r;
                norm = cand_norm;
                advanced = true;
                break;
            }
            t *= 0.5;
        }
        if !advanced {
            return Err(Error::Nonconvergence { iterations: iter, residual: norm });
        }
        if norm <= REDUCED_NEWTON_TOL {
            return Ok((y, iter));
        }
    }
    Err(Error::Nonconvergence { iterations: max_iters, residual: norm })
}

/// Reduced adjoint solve at primal coordinates `y`.
pub fn rom_solve_adjoint<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    mu: &ParamVec,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let jac = reduced_jacobian(sys, basis, y, mu)?;
    let (gy, _) = reduced_qoi_derivatives(sys, basis, y, mu)?;
    Ok(LuFactors::new(jac)?.solve_transpose(&gy))
}

/// Reduced sensitivity solve at primal coordinates `y` (`n x N_mu`).
pub fn rom_solve_sensitivity<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    mu: &ParamVec,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let jac = reduced_jacobian(sys, basis, y, mu)?;
    let jp = reduced_param_jacobian(sys, basis, y, mu)?;
    Ok(LuFactors::new(jac)?.solve_matrix(&(-jp)))
}

/// Reduced gradient `∇f̂ = (∂ĵ/∂mu - z' ∂r̂/∂mu)'` at `(z, y)`.
pub fn rom_gradient<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    z: &DVector<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    let (_, gmu) = reduced_qoi_derivatives(sys, basis, y, mu)?;
    let jp = reduced_param_jacobian(sys, basis, y, mu)?;
    Ok(gmu - jp.transpose() * z)
}

/// Reduced objective, gradient, and the solutions behind them.
#[derive(Debug, Clone)]
pub struct RomSolution {
    /// Reduced primal coordinates.
    pub y: DVector<f64>,
    /// Reduced adjoint coordinates.
    pub lambda: DVector<f64>,
    /// Objective value `f̂(mu)`.
    pub f: f64,
    /// Gradient `∇f̂(mu)`.
    pub gradient: DVector<f64>,
    /// Newton iterations spent on the primal.
    pub newton_iterations: usize,
}

/// Solves the reduced primal and adjoint, then evaluates `f̂` and `∇f̂`.
pub fn rom_objective_and_gradient<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    mu: &ParamVec,
    guess: &DVector<f64>,
) -> Result<RomSolution> {
    let (y, newton_iterations) = rom_solve_primal(sys, basis, mu, guess)?;
    let lambda = rom_solve_adjoint(sys, basis, mu, &y)?;
    let f = reduced_qoi(sys, basis, &y, mu)?;
    let gradient = rom_gradient(sys, basis, &lambda, &y, mu)?;
    Ok(RomSolution { y, lambda, f, gradient, newton_iterations })
}
