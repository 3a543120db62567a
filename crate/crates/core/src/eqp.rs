//! Hyperreduced (weighted) evaluation of reduced quantities and training of
//! the element weights by linear programming.
//!
//! Every reduced quantity is a sum of per-element contributions; its
//! hyperreduced version multiplies each contribution by a nonnegative weight
//! and skips zero-weight elements entirely. All weights equal to one
//! reproduces the plain reduced quantity exactly.
//!
//! Weights are trained by minimizing their sum subject to accuracy
//! constraints tying each weighted quantity to its unweighted value at
//! training parameters (infinity-norm bounds per constraint family, recast
//! as paired one-sided inequalities). The all-ones vector is always
//! feasible, so the training program cannot be infeasible for well-formed
//! inputs.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{map_elements, map_elements_seq};
use crate::basis::ReducedBasis;
use crate::linalg::LuFactors;
use crate::lp::{solve_lp, LinearProgram, LpOptions, LpStatus};
use crate::system::{ParamVec, UnassembledSystem};
use crate::{Error, Result};

/// Absolute Newton tolerance for reduced and hyperreduced primal solves.
pub const REDUCED_NEWTON_TOL: f64 = 1e-10;

/// Slack allowed when verifying trained weights against their constraints,
/// absorbing LP-solver roundoff.
pub const POST_TRAINING_SLACK: f64 = 1e-9;

/// Relative tolerance for dropping linearly dependent constraint rows.
pub const DEDUP_TOL: f64 = 1e-10;

/// Nonnegative per-element weights with cached support.
#[derive(Debug, Clone)]
pub struct WeightVector {
    weights: Vec<f64>,
    support: Vec<usize>,
}

impl WeightVector {
    /// Validates and stores a weight vector.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let support = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(e, _)| e)
            .collect();
        Ok(Self { weights, support })
    }

    /// The all-ones weights (no hyperreduction).
    pub fn ones(n_elems: usize) -> Self {
        Self {
            weights: vec![1.0; n_elems],
            support: (0..n_elems).collect(),
        }
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// True for zero-length vectors.
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight of element `e`.
    pub fn get(&self, e: usize) -> f64 {
        self.weights[e]
    }

    /// All weights.
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Indices of elements with nonzero weight.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Number of nonzero weights.
    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    /// Fraction of elements with nonzero weight.
    pub fn nnz_fraction(&self) -> f64 {
        self.support.len() as f64 / self.weights.len() as f64
    }

    /// Sum of the weights (the training objective).
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

// ---------------------------------------------------------------------------
// Per-element reduced contributions.
//
// These are the single source of truth for both the weighted evaluations
// (sums over the support) and the training constraint columns, so the two
// agree to the last bit.
// ---------------------------------------------------------------------------

fn gather_states(
    basis: &ReducedBasis,
    e: usize,
    y: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let r = basis.restriction(e);
    let u_own = &r.offset_own + &r.phi_own * y;
    let u_nbr = &r.offset_neighbor + &r.phi_neighbor * y;
    (u_own, u_nbr)
}

fn elem_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> DVector<f64> {
    let (u_own, u_nbr) = gather_states(basis, e, y);
    let r_e = sys.element_residual(e, &u_own, &u_nbr, mu);
    basis.restriction(e).phi_own.transpose() * r_e
}

fn elem_qoi<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> f64 {
    let (u_own, _) = gather_states(basis, e, y);
    sys.element_qoi(e, &u_own, mu)
}

fn elem_adjoint_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    z: &DVector<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> DVector<f64> {
    let (u_own, u_nbr) = gather_states(basis, e, y);
    let r = basis.restriction(e);
    let lambda_e = &r.phi_own * z;
    let (j_own, j_nbr) = sys.element_residual_state_jac(e, &u_own, &u_nbr, mu);
    let g = sys.element_qoi_state_grad(e, &u_own, mu);
    r.phi_own.transpose() * (j_own.transpose() * &lambda_e - g)
        + r.phi_neighbor.transpose() * (j_nbr.transpose() * &lambda_e)
}

fn elem_gradient<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    z: &DVector<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> DVector<f64> {
    let (u_own, u_nbr) = gather_states(basis, e, y);
    let r = basis.restriction(e);
    let lambda_e = &r.phi_own * z;
    let jp = sys.element_residual_param_jac(e, &u_own, &u_nbr, mu);
    let gp = sys.element_qoi_param_grad(e, &u_own, mu);
    gp - jp.transpose() * lambda_e
}

fn elem_sensitivity_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> DMatrix<f64> {
    let (u_own, u_nbr) = gather_states(basis, e, y);
    let r = basis.restriction(e);
    let (j_own, j_nbr) = sys.element_residual_state_jac(e, &u_own, &u_nbr, mu);
    let jp = sys.element_residual_param_jac(e, &u_own, &u_nbr, mu);
    r.phi_own.transpose()
        * (j_own * (&r.phi_own * w) + j_nbr * (&r.phi_neighbor * w) + jp)
}

fn elem_reduced_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> DMatrix<f64> {
    let (u_own, u_nbr) = gather_states(basis, e, y);
    let r = basis.restriction(e);
    let (j_own, j_nbr) = sys.element_residual_state_jac(e, &u_own, &u_nbr, mu);
    r.phi_own.transpose() * (j_own * &r.phi_own + j_nbr * &r.phi_neighbor)
}

fn elem_reduced_param_jac<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> DMatrix<f64> {
    let (u_own, u_nbr) = gather_states(basis, e, y);
    let r = basis.restriction(e);
    r.phi_own.transpose() * sys.element_residual_param_jac(e, &u_own, &u_nbr, mu)
}

fn elem_reduced_qoi_state_grad<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    e: usize,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> DVector<f64> {
    let (u_own, _) = gather_states(basis, e, y);
    let r = basis.restriction(e);
    r.phi_own.transpose() * sys.element_qoi_state_grad(e, &u_own, mu)
}

/// Weighted sum of per-element vector contributions over the support of
/// `rho`, accumulated in element order.
fn weighted_vector_sum<F>(rho: &WeightVector, dim: usize, f: F) -> Result<DVector<f64>>
where
    F: Fn(usize) -> Result<DVector<f64>> + Sync,
{
    let parts = map_elements(rho.support().len(), |i| {
        let e = rho.support()[i];
        Ok((e, f(e)?))
    })?;
    let mut acc = DVector::zeros(dim);
    for (e, part) in parts {
        acc.axpy(rho.get(e), &part, 1.0);
    }
    Ok(acc)
}

fn weighted_matrix_sum<F>(
    rho: &WeightVector,
    rows: usize,
    cols: usize,
    f: F,
) -> Result<DMatrix<f64>>
where
    F: Fn(usize) -> Result<DMatrix<f64>> + Sync,
{
    let parts = map_elements(rho.support().len(), |i| {
        let e = rho.support()[i];
        Ok((e, f(e)?))
    })?;
    let mut acc = DMatrix::zeros(rows, cols);
    for (e, part) in parts {
        acc += part * rho.get(e);
    }
    Ok(acc)
}

/// Weighted reduced residual `Σ_e rho_e Φ_e' r_e`, length `n`.
pub fn weighted_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    weighted_vector_sum(rho, basis.dim(), |e| Ok(elem_residual(sys, basis, e, y, mu)))
}

/// Weighted reduced QoI `Σ_e rho_e j_e`.
pub fn weighted_qoi<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<f64> {
    let parts = map_elements(rho.support().len(), |i| {
        let e = rho.support()[i];
        Ok(rho.get(e) * elem_qoi(sys, basis, e, y, mu))
    })?;
    Ok(parts.iter().sum())
}

/// Weighted reduced adjoint residual at adjoint coordinates `z`.
pub fn weighted_adjoint_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    z: &DVector<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    weighted_vector_sum(rho, basis.dim(), |e| {
        Ok(elem_adjoint_residual(sys, basis, e, z, y, mu))
    })
}

/// Weighted gradient reconstruction, length `N_mu`.
pub fn weighted_gradient<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    z: &DVector<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    weighted_vector_sum(rho, sys.num_params(), |e| {
        Ok(elem_gradient(sys, basis, e, z, y, mu))
    })
}

/// Weighted reduced sensitivity residual at sensitivity coordinates `w`
/// (`n x N_mu`).
pub fn weighted_sensitivity_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DMatrix<f64>> {
    weighted_matrix_sum(rho, basis.dim(), sys.num_params(), |e| {
        Ok(elem_sensitivity_residual(sys, basis, e, w, y, mu))
    })
}

/// Weighted reduced state Jacobian `∂r̃/∂y` (`n x n`).
pub fn weighted_reduced_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DMatrix<f64>> {
    weighted_matrix_sum(rho, basis.dim(), basis.dim(), |e| {
        Ok(elem_reduced_jacobian(sys, basis, e, y, mu))
    })
}

/// Weighted reduced parameter Jacobian `∂r̃/∂mu` (`n x N_mu`).
pub fn weighted_reduced_param_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DMatrix<f64>> {
    weighted_matrix_sum(rho, basis.dim(), sys.num_params(), |e| {
        Ok(elem_reduced_param_jac(sys, basis, e, y, mu))
    })
}

/// Weighted reduced QoI state gradient `∂j̃/∂y` (length `n`).
pub fn weighted_qoi_state_grad<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    weighted_vector_sum(rho, basis.dim(), |e| {
        Ok(elem_reduced_qoi_state_grad(sys, basis, e, y, mu))
    })
}

// ---------------------------------------------------------------------------
// Hyperreduced solves.
// ---------------------------------------------------------------------------

/// Newton solve of the weighted reduced primal `r̃(y, mu; rho) = 0`.
///
/// Converges to absolute tolerance [`REDUCED_NEWTON_TOL`]; only elements in
/// the support of `rho` are ever touched.
pub fn eqp_solve_primal<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    mu: &ParamVec,
    guess: &DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let mut y = guess.clone();
    let mut r = weighted_residual(sys, basis, rho, &y, mu)?;
    let mut norm = r.norm();
    let max_iters = 50;
    let mut history = vec![norm];
    for iter in 1..=max_iters {
        if norm <= REDUCED_NEWTON_TOL {
            return Ok((y, iter - 1));
        }
        let jac = weighted_reduced_jacobian(sys, basis, rho, &y, mu)?;
        let step = LuFactors::new(jac)?.solve(&(-&r));
        let mut t = 1.0;
        let mut advanced = false;
        for _ in 0..25 {
            let cand = &y + &step * t;
            let cand_r = weighted_residual(sys, basis, rho, &cand, mu)?;
            let cand_norm = cand_r.norm();
            if cand_norm.is_finite() && cand_norm < norm {
                y = cand;
                r = cand_r;
                norm = cand_norm;
                history.push(norm);
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

/// Solves the weighted reduced adjoint system at primal coordinates `y`.
pub fn eqp_solve_adjoint<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    mu: &ParamVec,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let jac = weighted_reduced_jacobian(sys, basis, rho, y, mu)?;
    let rhs = weighted_qoi_state_grad(sys, basis, rho, y, mu)?;
    Ok(LuFactors::new(jac)?.solve_transpose(&rhs))
}

/// Solves the weighted reduced sensitivity system at primal coordinates `y`.
pub fn eqp_solve_sensitivity<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    mu: &ParamVec,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let jac = weighted_reduced_jacobian(sys, basis, rho, y, mu)?;
    let rhs = weighted_reduced_param_jacobian(sys, basis, rho, y, mu)?;
    Ok(LuFactors::new(jac)?.solve_matrix(&(-rhs)))
}

/// Hyperreduced objective, gradient, and the solutions behind them.
#[derive(Debug, Clone)]
pub struct EqpSolution {
    /// Hyperreduced primal coordinates.
    pub y: DVector<f64>,
    /// Hyperreduced adjoint coordinates.
    pub lambda: DVector<f64>,
    /// Objective value `f̃(mu; rho)`.
    pub f: f64,
    /// Gradient `∇f̃(mu; rho)`.
    pub gradient: DVector<f64>,
    /// Newton iterations spent on the primal.
    pub newton_iterations: usize,
}

/// Solves the weighted primal and adjoint, then evaluates `f̃` and `∇f̃`.
pub fn eqp_objective_and_gradient<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    mu: &ParamVec,
    guess: &DVector<f64>,
) -> Result<EqpSolution> {
    let (y, newton_iterations) = eqp_solve_primal(sys, basis, rho, mu, guess)?;
    let lambda = eqp_solve_adjoint(sys, basis, rho, mu, &y)?;
    let f = weighted_qoi(sys, basis, rho, &y, mu)?;
    let gradient = weighted_gradient(sys, basis, rho, &lambda, &y, mu)?;
    Ok(EqpSolution { y, lambda, f, gradient, newton_iterations })
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// Tolerances for the six constraint families. Infinity means the family is
/// omitted from training.
#[derive(Debug, Clone, Copy)]
pub struct ToleranceSet {
    /// Domain volume.
    pub dv: f64,
    /// Primal residual.
    pub rp: f64,
    /// Adjoint residual.
    pub ra: f64,
    /// Gradient reconstruction.
    pub ga: f64,
    /// Quantity of interest.
    pub q: f64,
    /// Sensitivity residual.
    pub rs: f64,
}

impl ToleranceSet {
    /// All constraints omitted.
    pub fn unconstrained() -> Self {
        Self {
            dv: f64::INFINITY,
            rp: f64::INFINITY,
            ra: f64::INFINITY,
            ga: f64::INFINITY,
            q: f64::INFINITY,
            rs: f64::INFINITY,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.dv, self.rp, self.ra, self.ga, self.q, self.rs];
        if all.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::Contract("tolerances must be nonnegative".into()));
        }
        Ok(())
    }

    /// Tolerance of one family.
    pub fn get(&self, family: Family) -> f64 {
        match family {
            Family::DomainVolume => self.dv,
            Family::PrimalResidual => self.rp,
            Family::AdjointResidual => self.ra,
            Family::GradientRecon => self.ga,
            Family::Qoi => self.q,
            Family::SensitivityResidual => self.rs,
        }
    }
}

/// Constraint families of the training program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Weighted element volumes reproduce the domain volume.
    DomainVolume,
    /// Weighted primal residual stays small at the training solutions.
    PrimalResidual,
    /// Weighted adjoint residual stays small at the training solutions.
    AdjointResidual,
    /// Weighted gradient reconstruction matches the unweighted one.
    GradientRecon,
    /// Weighted QoI matches the unweighted one.
    Qoi,
    /// Weighted sensitivity residual stays small at the training solutions.
    SensitivityResidual,
}

impl Family {
    /// Short stable name used in debug dumps.
    pub fn tag(&self) -> &'static str {
        match self {
            Family::DomainVolume => "dv",
            Family::PrimalResidual => "rp",
            Family::AdjointResidual => "ra",
            Family::GradientRecon => "ga",
            Family::Qoi => "q",
            Family::SensitivityResidual => "rs",
        }
    }
}

/// Which constraint families participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintSelection {
    /// Volume, primal/adjoint residual, gradient, QoI.
    C1,
    /// Volume, primal/adjoint residual, gradient, sensitivity residual.
    C2,
    /// Everything: C2 plus the QoI constraint.
    #[default]
    C3,
}

impl ConstraintSelection {
    /// Families in this selection, in a fixed order.
    pub fn families(&self) -> &'static [Family] {
        match self {
            ConstraintSelection::C1 => &[
                Family::DomainVolume,
                Family::PrimalResidual,
                Family::AdjointResidual,
                Family::GradientRecon,
                Family::Qoi,
            ],
            ConstraintSelection::C2 => &[
                Family::DomainVolume,
                Family::PrimalResidual,
                Family::AdjointResidual,
                Family::GradientRecon,
                Family::SensitivityResidual,
            ],
            ConstraintSelection::C3 => &[
                Family::DomainVolume,
                Family::PrimalResidual,
                Family::AdjointResidual,
                Family::GradientRecon,
                Family::SensitivityResidual,
                Family::Qoi,
            ],
        }
    }

    /// True when the sensitivity-residual family participates.
    pub fn needs_sensitivity(&self) -> bool {
        self.families().contains(&Family::SensitivityResidual)
    }
}

/// Reduced solutions and cached per-element contribution columns at one
/// training parameter.
#[derive(Debug, Clone)]
pub struct TrainingPoint {
    /// Training parameter.
    pub mu: ParamVec,
    /// Reduced primal solution (weights all ones).
    pub y_star: DVector<f64>,
    /// Reduced adjoint solution.
    pub lambda_star: DVector<f64>,
    /// Reduced sensitivity solution, when the selection needs it.
    pub sensitivity: Option<DMatrix<f64>>,
    /// Per-element primal residual contributions, `n x N_e`.
    pub rp_cols: DMatrix<f64>,
    /// Per-element adjoint residual contributions, `n x N_e`.
    pub ra_cols: DMatrix<f64>,
    /// Per-element gradient contributions, `N_mu x N_e`.
    pub ga_cols: DMatrix<f64>,
    /// Per-element QoI contributions, length `N_e`.
    pub q_cols: DVector<f64>,
    /// Per-element sensitivity residual contributions, `(n N_mu) x N_e`
    /// flattened row-major.
    pub rs_cols: Option<DMatrix<f64>>,
}

/// Training data for the weight LP over a set of training parameters.
#[derive(Debug, Clone)]
pub struct EqpTrainingData {
    /// One entry per training parameter.
    pub points: Vec<TrainingPoint>,
    n_elems: usize,
    n_params: usize,
    basis_dim: usize,
}

impl EqpTrainingData {
    /// Solves the reduced primal/adjoint (and sensitivity when needed) at
    /// every training parameter with all-ones weights and caches the
    /// per-element contribution columns of each constraint family.
    pub fn collect<S: UnassembledSystem + ?Sized>(
        sys: &S,
        basis: &ReducedBasis,
        training_params: &[ParamVec],
        guess: &DVector<f64>,
        selection: ConstraintSelection,
    ) -> Result<Self> {
        if training_params.is_empty() {
            return Err(Error::Contract("training set must not be empty".into()));
        }
        let ones = WeightVector::ones(sys.num_elements());
        let n = basis.dim();
        let n_mu = sys.num_params();
        let ne = sys.num_elements();
        let mut points = Vec::with_capacity(training_params.len());
        for mu in training_params {
            let (y_star, _) = eqp_solve_primal(sys, basis, &ones, mu, guess)?;
            let lambda_star = eqp_solve_adjoint(sys, basis, &ones, mu, &y_star)?;
            let sensitivity = if selection.needs_sensitivity() {
                Some(eqp_solve_sensitivity(sys, basis, &ones, mu, &y_star)?)
            } else {
                None
            };

            let cols = map_elements(ne, |e| {
                let rp = elem_residual(sys, basis, e, &y_star, mu);
                let ra = elem_adjoint_residual(sys, basis, e, &lambda_star, &y_star, mu);
                let ga = elem_gradient(sys, basis, e, &lambda_star, &y_star, mu);
                let q = elem_qoi(sys, basis, e, &y_star, mu);
                let rs = sensitivity
                    .as_ref()
                    .map(|w| elem_sensitivity_residual(sys, basis, e, w, &y_star, mu));
                Ok((rp, ra, ga, q, rs))
            })?;

            let mut rp_cols = DMatrix::zeros(n, ne);
            let mut ra_cols = DMatrix::zeros(n, ne);
            let mut ga_cols = DMatrix::zeros(n_mu, ne);
            let mut q_cols = DVector::zeros(ne);
            let mut rs_cols =
                sensitivity.as_ref().map(|_| DMatrix::zeros(n * n_mu, ne));
            for (e, (rp, ra, ga, q, rs)) in cols.into_iter().enumerate() {
                rp_cols.set_column(e, &rp);
                ra_cols.set_column(e, &ra);
                ga_cols.set_column(e, &ga);
                q_cols[e] = q;
                if let (Some(dst), Some(src)) = (rs_cols.as_mut(), rs) {
                    // Row-major flattening: entry (i, j) lands in row i*N_mu + j.
                    for i in 0..n {
                        for j in 0..n_mu {
                            dst[(i * n_mu + j, e)] = src[(i, j)];
                        }
                    }
                }
            }
            points.push(TrainingPoint {
                mu: mu.clone(),
                y_star,
                lambda_star,
                sensitivity,
                rp_cols,
                ra_cols,
                ga_cols,
                q_cols,
                rs_cols,
            });
        }
        Ok(Self { points, n_elems: ne, n_params: n_mu, basis_dim: n })
    }

    /// Number of elements.
    pub fn num_elements(&self) -> usize {
        self.n_elems
    }
}

/// Identifies one constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLabel {
    /// Constraint family the row belongs to.
    pub family: Family,
    /// Index of the training parameter the row came from.
    pub training_index: usize,
    /// Component within the family block (0 for scalar families).
    pub component: usize,
}

/// Stacked constraint rows: each family contributes rows such that the
/// family constraint reads `|A rho - b|_inf <= delta_family` rowwise.
pub struct ConstraintRows {
    /// Row matrix, `rows x N_e`.
    pub a: DMatrix<f64>,
    /// Right-hand side per row.
    pub b: DVector<f64>,
    /// Provenance of each row.
    pub labels: Vec<RowLabel>,
}

/// Assembles the constraint rows of every family in `selection`.
///
/// The residual families (primal, adjoint, sensitivity) use the simplified
/// zero right-hand side, exact because the cached reduced solutions zero the
/// unweighted quantities; the volume, gradient, and QoI families carry the
/// unweighted values on the right-hand side.
pub fn assemble_constraint_rows<S: UnassembledSystem + ?Sized>(
    training: &EqpTrainingData,
    selection: ConstraintSelection,
    _basis: &ReducedBasis,
    sys: &S,
) -> Result<ConstraintRows> {
    if training.points.is_empty() {
        return Err(Error::Contract("training set must not be empty".into()));
    }
    let ne = training.n_elems;
    let conn = sys.connectivity();
    let mut rows: Vec<(DVector<f64>, f64, RowLabel)> = Vec::new();
    for family in selection.families() {
        match family {
            Family::DomainVolume => {
                let vol = DVector::from_column_slice(conn.element_volumes());
                rows.push((
                    vol,
                    conn.domain_volume(),
                    RowLabel { family: *family, training_index: 0, component: 0 },
                ));
            }
            Family::PrimalResidual => {
                for (t, p) in training.points.iter().enumerate() {
                    for i in 0..training.basis_dim {
                        rows.push((
                            p.rp_cols.row(i).transpose(),
                            0.0,
                            RowLabel { family: *family, training_index: t, component: i },
                        ));
                    }
                }
            }
            Family::AdjointResidual => {
                for (t, p) in training.points.iter().enumerate() {
                    for i in 0..training.basis_dim {
                        rows.push((
                            p.ra_cols.row(i).transpose(),
                            0.0,
                            RowLabel { family: *family, training_index: t, component: i },
                        ));
                    }
                }
            }
            Family::GradientRecon => {
                for (t, p) in training.points.iter().enumerate() {
                    for i in 0..training.n_params {
                        let row = p.ga_cols.row(i).transpose();
                        let b = row.sum();
                        rows.push((
                            row,
                            b,
                            RowLabel { family: *family, training_index: t, component: i },
                        ));
                    }
                }
            }
            Family::Qoi => {
                for (t, p) in training.points.iter().enumerate() {
                    let row = p.q_cols.clone();
                    let b = row.sum();
                    rows.push((
                        row,
                        b,
                        RowLabel { family: *family, training_index: t, component: 0 },
                    ));
                }
            }
            Family::SensitivityResidual => {
                for (t, p) in training.points.iter().enumerate() {
                    let rs = p.rs_cols.as_ref().ok_or_else(|| {
                        Error::Contract(
                            "sensitivity columns missing; collect training data with a \
                             selection that includes the sensitivity family"
                                .into(),
                        )
                    })?;
                    for i in 0..rs.nrows() {
                        rows.push((
                            rs.row(i).transpose(),
                            0.0,
                            RowLabel { family: *family, training_index: t, component: i },
                        ));
                    }
                }
            }
        }
    }
    let mut a = DMatrix::zeros(rows.len(), ne);
    let mut b = DVector::zeros(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (row, rhs, label)) in rows.into_iter().enumerate() {
        a.row_mut(i).copy_from(&row.transpose());
        b[i] = rhs;
        labels.push(label);
    }
    Ok(ConstraintRows { a, b, labels })
}

/// Removes linearly dependent rows by column-pivoted Gram-Schmidt on the
/// transposed row stack: rows whose residual norm after projection falls
/// below `tol` times the largest pivot norm are dropped. Returns the kept
/// rows (original order) and their indices.
pub fn dedup_rows(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let rows = a.nrows();
    if rows == 0 {
        return (a.clone(), b.clone(), Vec::new());
    }
    let mut residuals: Vec<DVector<f64>> = (0..rows).map(|i| a.row(i).transpose()).collect();
    let mut alive: Vec<bool> = residuals.iter().map(|r| r.norm() > 0.0).collect();
    let mut kept: Vec<usize> = Vec::new();
    let mut max_pivot: f64 = 0.0;
    loop {
        // Largest remaining residual, earliest index on ties.
        let mut best: Option<(usize, f64)> = None;
        for i in 0..rows {
            if !alive[i] {
                continue;
            }
            let norm = residuals[i].norm();
            if best.map_or(true, |(_, bn)| norm > bn) {
                best = Some((i, norm));
            }
        }
        let Some((pivot, norm)) = best else { break };
        max_pivot = max_pivot.max(norm);
        if norm <= tol * max_pivot {
            break;
        }
        kept.push(pivot);
        alive[pivot] = false;
        let q = residuals[pivot].clone() / norm;
        for i in 0..rows {
            if alive[i] {
                let c = q.dot(&residuals[i]);
                residuals[i].axpy(-c, &q, 1.0);
            }
        }
    }
    kept.sort_unstable();
    let mut a_out = DMatrix::zeros(kept.len(), a.ncols());
    let mut b_out = DVector::zeros(kept.len());
    for (out_i, &i) in kept.iter().enumerate() {
        a_out.row_mut(out_i).copy_from(&a.row(i));
        b_out[out_i] = b[i];
    }
    (a_out, b_out, kept)
}

/// Result of weight training, with the rows used for verification.
pub struct TrainedWeights {
    /// The trained weights.
    pub weights: WeightVector,
    /// LP objective (sum of weights).
    pub objective: f64,
    /// Rows retained after deduplication (for diagnostics).
    pub active_rows: usize,
    /// Total rows assembled before deduplication.
    pub total_rows: usize,
}

fn family_slack(
    rows: &ConstraintRows,
    delta: &ToleranceSet,
    rho: &DVector<f64>,
) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for i in 0..rows.a.nrows() {
        let tol = delta.get(rows.labels[i].family);
        if !tol.is_finite() {
            continue;
        }
        let val = (rows.a.row(i).transpose().dot(rho) - rows.b[i]).abs();
        out.push((i, val - tol));
    }
    out
}

/// Trains the weights: minimizes their sum subject to the selected,
/// finite-tolerance constraint families, then verifies every original row
/// against its tolerance (re-activating dropped rows and re-solving if
/// deduplication discarded a binding one).
pub fn train_weights<S: UnassembledSystem + ?Sized>(
    training: &EqpTrainingData,
    selection: ConstraintSelection,
    delta: &ToleranceSet,
    basis: &ReducedBasis,
    sys: &S,
) -> Result<TrainedWeights> {
    delta.validate()?;
    let ne = training.n_elems;
    let all_rows = assemble_constraint_rows(training, selection, basis, sys)?;
    // Families with infinite tolerance are omitted.
    let finite_idx: Vec<usize> = (0..all_rows.a.nrows())
        .filter(|&i| delta.get(all_rows.labels[i].family).is_finite())
        .collect();
    if finite_idx.is_empty() {
        // Unconstrained: the nonnegative minimum is identically zero.
        return Ok(TrainedWeights {
            weights: WeightVector::new(vec![0.0; ne])?,
            objective: 0.0,
            active_rows: 0,
            total_rows: 0,
        });
    }
    let mut finite_a = DMatrix::zeros(finite_idx.len(), ne);
    let mut finite_b = DVector::zeros(finite_idx.len());
    let mut finite_labels = Vec::with_capacity(finite_idx.len());
    for (out_i, &i) in finite_idx.iter().enumerate() {
        finite_a.row_mut(out_i).copy_from(&all_rows.a.row(i));
        finite_b[out_i] = all_rows.b[i];
        finite_labels.push(all_rows.labels[i]);
    }
    let finite_rows = ConstraintRows { a: finite_a, b: finite_b, labels: finite_labels };

    let (_, _, mut active) = dedup_rows(&finite_rows.a, &finite_rows.b, DEDUP_TOL);
    let total_rows = finite_rows.a.nrows();
    let lp_opts = LpOptions::default();

    for _round in 0..8 {
        // min sum(rho) s.t. |a_i rho - b_i| <= delta_i as paired one-sided
        // rows, rho >= 0.
        let m = active.len();
        let mut g = DMatrix::zeros(2 * m, ne);
        let mut h = DVector::zeros(2 * m);
        for (k, &i) in active.iter().enumerate() {
            let tol = delta.get(finite_rows.labels[i].family);
            g.row_mut(k).copy_from(&finite_rows.a.row(i));
            h[k] = finite_rows.b[i] + tol;
            let neg = -finite_rows.a.row(i);
            g.row_mut(m + k).copy_from(&neg);
            h[m + k] = tol - finite_rows.b[i];
        }
        let lp = LinearProgram::new(DVector::from_element(ne, 1.0), g, h)?;
        let sol = solve_lp(&lp, &lp_opts)?;
        if sol.status != LpStatus::Optimal {
            return Err(Error::LpInfeasible(format!(
                "training LP ended with status {:?} although the all-ones point is feasible",
                sol.status
            )));
        }
        let rho_vec = DVector::from_fn(ne, |e, _| sol.x[e].max(0.0));

        let violations: Vec<usize> = family_slack(&finite_rows, delta, &rho_vec)
            .into_iter()
            .filter(|(i, slack)| *slack > POST_TRAINING_SLACK && !active.contains(i))
            .map(|(i, _)| i)
            .collect();
        if violations.is_empty() {
            // Verified: every finite-tolerance row holds within slack.
            let worst = family_slack(&finite_rows, delta, &rho_vec)
                .into_iter()
                .map(|(_, s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            if worst > POST_TRAINING_SLACK {
                return Err(Error::LpInfeasible(format!(
                    "trained weights violate an active constraint by {worst:.3e}"
                )));
            }
            let weights = WeightVector::new(rho_vec.iter().copied().collect())?;
            let objective = weights.sum();
            return Ok(TrainedWeights {
                weights,
                objective,
                active_rows: active.len(),
                total_rows,
            });
        }
        active.extend(violations);
        active.sort_unstable();
        active.dedup();
    }
    Err(Error::LpInfeasible(
        "row re-activation failed to converge".into(),
    ))
}

/// Writes `(A, b, labels, rho)` as CSV for inspection.
pub fn dump_training_csv(
    rows: &ConstraintRows,
    rho: Option<&WeightVector>,
    path: &std::path::Path,
) -> Result<()> {
    use std::io::Write;
    let mut out = std::fs::File::create(path)?;
    write!(out, "family,training_index,component,b")?;
    for e in 0..rows.a.ncols() {
        write!(out, ",a{e}")?;
    }
    writeln!(out)?;
    for i in 0..rows.a.nrows() {
        let l = rows.labels[i];
        write!(
            out,
            "{},{},{},{:.12e}",
            l.family.tag(),
            l.training_index,
            l.component,
            rows.b[i]
        )?;
        for e in 0..rows.a.ncols() {
            write!(out, ",{:.12e}", rows.a[(i, e)])?;
        }
        writeln!(out)?;
    }
    if let Some(rho) = rho {
        write!(out, "rho,,,")?;
        for e in 0..rho.len() {
            write!(out, ",{:.12e}", rho.get(e))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Sequential variant of [`weighted_residual`], for the benchmark
/// comparison.
pub fn weighted_residual_seq<S: UnassembledSystem + ?Sized>(
    sys: &S,
    basis: &ReducedBasis,
    rho: &WeightVector,
    y: &DVector<f64>,
    mu: &ParamVec,
) -> Result<DVector<f64>> {
    let parts = map_elements_seq(rho.support().len(), |i| {
        let e = rho.support()[i];
        Ok((e, elem_residual(sys, basis, e, y, mu)))
    })?;
    let mut acc = DVector::zeros(basis.dim());
    for (e, part) in parts {
        acc.axpy(rho.get(e), &part, 1.0);
    }
    Ok(acc)
}
