//! Nonlinear (primal), adjoint, and sensitivity solves for the full-order
//! system, and the adjoint-based objective gradient.
//!
//! The primal solver is damped Newton with residual-norm backtracking and
//! optional pseudo-transient continuation. Adjoint and sensitivity systems
//! share one factorization of the state Jacobian: the adjoint uses the
//! transposed solve, the sensitivity the plain solve.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{
    assemble_jacobian_into, assemble_param_jacobian, assemble_qoi, assemble_qoi_derivatives,
    assemble_residual,
};
use crate::linalg::{CsrMatrix, LuFactors};
use crate::system::{ParamVec, StateVec, UnassembledSystem};
use crate::{Error, Result};

/// Continuation strategy for the primal Newton solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Continuation {
    /// Plain damped Newton.
    #[default]
    None,
    /// Adds `(1/tau) I` to the Jacobian; `tau` doubles after each accepted
    /// step and shrinks when the line search fails, so the iteration blends
    /// from gradient-flow-like steps into full Newton.
    PseudoTransient,
}

/// Configuration for the primal Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonConfig {
    /// Absolute residual tolerance.
    pub abs_tol: f64,
    /// Tolerance relative to the initial residual norm.
    pub rel_tol: f64,
    /// Maximum Newton iterations.
    pub max_iters: usize,
    /// Continuation strategy.
    pub continuation: Continuation,
    /// Initial pseudo-time step for [`Continuation::PseudoTransient`].
    pub ptc_initial_step: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_iters: 50,
            continuation: Continuation::None,
            ptc_initial_step: 1.0,
        }
    }
}

impl NewtonConfig {
    fn validate(&self) -> Result<()> {
        if self.abs_tol <= 0.0 || self.rel_tol <= 0.0 {
            return Err(Error::Contract("Newton tolerances must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Contract("Newton max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of a primal solve.
#[derive(Debug, Clone)]
pub struct PrimalSolve {
    /// Converged state.
    pub u: StateVec,
    /// Newton iterations performed (0 when the guess already satisfied the
    /// tolerance).
    pub iterations: usize,
    /// Residual norms, one entry per visited iterate including the guess.
    pub residual_history: Vec<f64>,
}

const MAX_BACKTRACKS: usize = 20;

/// Solves `r(u, mu) = 0` by damped Newton starting from `guess`.
pub fn solve_primal<S: UnassembledSystem + ?Sized>(
    sys: &S,
    mu: &ParamVec,
    guess: &StateVec,
    cfg: &NewtonConfig,
) -> Result<PrimalSolve> {
    cfg.validate()?;
    if guess.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("Newton guess must be finite".into()));
    }
    let mut u = guess.clone();
    let mut r = assemble_residual(sys, &u, mu)?;
    let mut r_norm = r.norm();
    let tol = cfg.abs_tol.max(cfg.rel_tol * r_norm);
    let mut history = vec![r_norm];
    if r_norm <= tol {
        return Ok(PrimalSolve { u, iterations: 0, residual_history: history });
    }

    let mut jac = CsrMatrix::pattern_from_connectivity(sys.connectivity());
    let mut tau = cfg.ptc_initial_step;
    for iter in 1..=cfg.max_iters {
        assemble_jacobian_into(sys, &u, mu, &mut jac)?;
        let mut dense = jac.to_dense();
        if cfg.continuation == Continuation::PseudoTransient {
            for i in 0..dense.nrows() {
                dense[(i, i)] += 1.0 / tau;
            }
        }
        let step = LuFactors::new(dense)?.solve(&(-&r));

        // Backtracking on the residual norm, halving the step length.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let candidate = &u + &step * t;
            let cand_r = assemble_residual(sys, &candidate, mu)?;
            let cand_norm = cand_r.norm();
            if cand_norm.is_finite() && cand_norm < r_norm {
                accepted = Some((candidate, cand_r, cand_norm));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((nu, nr, nn)) => {
                u = nu;
                r = nr;
                r_norm = nn;
                history.push(r_norm);
                if cfg.continuation == Continuation::PseudoTransient {
                    tau *= 2.0;
                }
                if r_norm <= tol {
                    return Ok(PrimalSolve { u, iterations: iter, residual_history: history });
                }
            }
            None => {
                if cfg.continuation == Continuation::PseudoTransient {
                    // More damping; the iterate stays put.
                    tau *= 0.25;
                    history.push(r_norm);
                } else {
                    return Err(Error::Nonconvergence { iterations: iter, residual: r_norm });
                }
            }
        }
    }
    Err(Error::Nonconvergence { iterations: cfg.max_iters, residual: r_norm })
}

/// Factors the state Jacobian at `(u, mu)`; the factors serve both adjoint
/// (transposed) and sensitivity (plain) systems.
pub fn factor_state_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<LuFactors> {
    let mut jac = CsrMatrix::pattern_from_connectivity(sys.connectivity());
    assemble_jacobian_into(sys, u, mu, &mut jac)?;
    LuFactors::from_csr(&jac)
}

/// Solves the adjoint system `(∂r/∂u)' lambda = (∂j/∂u)'` at a primal
/// solution.
pub fn solve_adjoint<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u_star: &StateVec,
    mu: &ParamVec,
) -> Result<StateVec> {
    let factors = factor_state_jacobian(sys, u_star, mu)?;
    solve_adjoint_with(sys, u_star, mu, &factors)
}

/// Adjoint solve reusing an existing factorization.
pub fn solve_adjoint_with<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u_star: &StateVec,
    mu: &ParamVec,
    factors: &LuFactors,
) -> Result<StateVec> {
    let (qoi_state_grad, _) = assemble_qoi_derivatives(sys, u_star, mu)?;
    Ok(factors.solve_transpose(&qoi_state_grad))
}

/// Solves the sensitivity system `(∂r/∂u) w = -∂r/∂mu`, one right-hand side
/// per parameter with a single factorization.
pub fn solve_sensitivity<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u_star: &StateVec,
    mu: &ParamVec,
) -> Result<DMatrix<f64>> {
    let factors = factor_state_jacobian(sys, u_star, mu)?;
    solve_sensitivity_with(sys, u_star, mu, &factors)
}

/// Sensitivity solve reusing an existing factorization.
pub fn solve_sensitivity_with<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u_star: &StateVec,
    mu: &ParamVec,
    factors: &LuFactors,
) -> Result<DMatrix<f64>> {
    let param_jac = assemble_param_jacobian(sys, u_star, mu)?;
    Ok(factors.solve_matrix(&(-param_jac)))
}

/// Objective value, adjoint gradient, and the primal/adjoint pair behind
/// them.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// `f(mu) = j(u*(mu), mu)`.
    pub f: f64,
    /// `∇f(mu) = (∂j/∂mu - lambda' ∂r/∂mu)'`.
    pub gradient: DVector<f64>,
    /// Primal solution.
    pub u_star: StateVec,
    /// Adjoint solution.
    pub lambda_star: StateVec,
    /// Newton iterations spent on the primal solve.
    pub newton_iterations: usize,
}

/// Evaluates `f(mu)` and its gradient by one primal solve and one adjoint
/// solve.
pub fn objective_and_gradient<S: UnassembledSystem + ?Sized>(
    sys: &S,
    mu: &ParamVec,
    guess: &StateVec,
    cfg: &NewtonConfig,
) -> Result<ObjectiveEval> {
    let primal = solve_primal(sys, mu, guess, cfg)?;
    let factors = factor_state_jacobian(sys, &primal.u, mu)?;
    let lambda = solve_adjoint_with(sys, &primal.u, mu, &factors)?;
    let f = assemble_qoi(sys, &primal.u, mu)?;
    let (_, qoi_param_grad) = assemble_qoi_derivatives(sys, &primal.u, mu)?;
    let param_jac = assemble_param_jacobian(sys, &primal.u, mu)?;
    let gradient = qoi_param_grad - param_jac.transpose() * &lambda;
    Ok(ObjectiveEval {
        f,
        gradient,
        u_star: primal.u,
        lambda_star: lambda,
        newton_iterations: primal.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly;
    use crate::problems::linear::LinearSystem;
    use crate::system::ElementConnectivity;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// One-dof system r(u, mu) = u^3 - mu.
    struct CubeRoot {
        conn: ElementConnectivity,
    }

    impl CubeRoot {
        fn new() -> Self {
            Self {
                conn: ElementConnectivity::new(1, vec![vec![0]], vec![vec![]], vec![1.0], 1.0)
                    .unwrap(),
            }
        }
    }

    impl UnassembledSystem for CubeRoot {
        fn num_dofs(&self) -> usize {
            1
        }
        fn num_params(&self) -> usize {
            1
        }
        fn connectivity(&self) -> &ElementConnectivity {
            &self.conn
        }
        fn element_residual(
            &self,
            _e: usize,
            own: &DVector<f64>,
            _n: &DVector<f64>,
            mu: &ParamVec,
        ) -> DVector<f64> {
            DVector::from_element(1, own[0].powi(3) - mu[0])
        }
        fn element_qoi(&self, _e: usize, own: &DVector<f64>, _mu: &ParamVec) -> f64 {
            own[0]
        }
        fn element_residual_state_jac(
            &self,
            _e: usize,
            own: &DVector<f64>,
            _n: &DVector<f64>,
            _mu: &ParamVec,
        ) -> (DMatrix<f64>, DMatrix<f64>) {
            (
                DMatrix::from_element(1, 1, 3.0 * own[0] * own[0]),
                DMatrix::zeros(1, 0),
            )
        }
        fn element_residual_param_jac(
            &self,
            _e: usize,
            _own: &DVector<f64>,
            _n: &DVector<f64>,
            _mu: &ParamVec,
        ) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, -1.0)
        }
        fn element_qoi_state_grad(&self, _e: usize, _own: &DVector<f64>, _mu: &ParamVec) -> DVector<f64> {
            DVector::from_element(1, 1.0)
        }
        fn element_qoi_param_grad(&self, _e: usize, _own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
            DVector::zeros(mu.len())
        }
    }

    /// One-dof chain r(u, mu) = u - mu^2 with j = u^2, so f(mu) = mu^4.
    struct QuarticChain {
        conn: ElementConnectivity,
    }

    impl QuarticChain {
        fn new() -> Self {
            Self {
                conn: ElementConnectivity::new(1, vec![vec![0]], vec![vec![]], vec![1.0], 1.0)
                    .unwrap(),
            }
        }
    }

    impl UnassembledSystem for QuarticChain {
        fn num_dofs(&self) -> usize {
            1
        }
        fn num_params(&self) -> usize {
            1
        }
        fn connectivity(&self) -> &ElementConnectivity {
            &self.conn
        }
        fn element_residual(
            &self,
            _e: usize,
            own: &DVector<f64>,
            _n: &DVector<f64>,
            mu: &ParamVec,
        ) -> DVector<f64> {
            DVector::from_element(1, own[0] - mu[0] * mu[0])
        }
        fn element_qoi(&self, _e: usize, own: &DVector<f64>, _mu: &ParamVec) -> f64 {
            own[0] * own[0]
        }
        fn element_residual_state_jac(
            &self,
            _e: usize,
            _own: &DVector<f64>,
            _n: &DVector<f64>,
            _mu: &ParamVec,
        ) -> (DMatrix<f64>, DMatrix<f64>) {
            (DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 0))
        }
        fn element_residual_param_jac(
            &self,
            _e: usize,
            _own: &DVector<f64>,
            _n: &DVector<f64>,
            mu: &ParamVec,
        ) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, -2.0 * mu[0])
        }
        fn element_qoi_state_grad(&self, _e: usize, own: &DVector<f64>, _mu: &ParamVec) -> DVector<f64> {
            DVector::from_element(1, 2.0 * own[0])
        }
        fn element_qoi_param_grad(&self, _e: usize, _own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
            DVector::zeros(mu.len())
        }
    }

    fn random_spd_system(seed: u64, n: usize, n_mu: usize) -> LinearSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(n, n) * (n as f64);
        let b_mu = DMatrix::from_fn(n, n_mu, |_, _| rng.random_range(-1.0..1.0));
        let b0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        LinearSystem::new(a, b_mu, b0)
    }

    #[test]
    fn linear_system_converges_in_one_iteration() {
        let sys = random_spd_system(11, 8, 2);
        let mu = DVector::from_vec(vec![0.4, -0.6]);
        let sol = solve_primal(&sys, &mu, &DVector::zeros(8), &NewtonConfig::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        let r = assemble::residual(&sys, &sol.u, &mu);
        assert!(r.norm() <= 1e-10);
    }

    mod assemble {
        use super::*;
        pub fn residual(sys: &LinearSystem, u: &StateVec, mu: &ParamVec) -> StateVec {
            assembly::assemble_residual(sys, u, mu).unwrap()
        }
    }

    #[test]
    fn cube_root_from_three_reaches_two() {
        let sys = CubeRoot::new();
        let mu = DVector::from_element(1, 8.0);
        let sol = solve_primal(&sys, &mu, &DVector::from_element(1, 3.0), &NewtonConfig::default())
            .unwrap();
        assert_relative_eq!(sol.u[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn newton_is_superlinear_near_the_root() {
        let sys = CubeRoot::new();
        let mu = DVector::from_element(1, 8.0);
        let sol = solve_primal(&sys, &mu, &DVector::from_element(1, 2.2), &NewtonConfig::default())
            .unwrap();
        let h = &sol.residual_history;
        assert!(h.len() >= 3);
        let last = h[h.len() - 1];
        let prev = h[h.len() - 2];
        // Quadratic contraction: ||r_{k+1}|| / ||r_k||^2 stays bounded.
        assert!(last / (prev * prev) < 10.0, "ratio {}", last / (prev * prev));
    }

    #[test]
    fn exact_guess_is_accepted_without_iterations() {
        let sys = CubeRoot::new();
        let mu = DVector::from_element(1, 8.0);
        let sol = solve_primal(&sys, &mu, &DVector::from_element(1, 2.0), &NewtonConfig::default())
            .unwrap();
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn nonconvergence_carries_last_residual() {
        let sys = CubeRoot::new();
        let mu = DVector::from_element(1, 8.0);
        let cfg = NewtonConfig { max_iters: 1, ..Default::default() };
        let err = solve_primal(&sys, &mu, &DVector::from_element(1, 100.0), &cfg);
        match err {
            Err(Error::Nonconvergence { residual, .. }) => assert!(residual.is_finite()),
            other => panic!("expected Nonconvergence, got {other:?}"),
        }
    }

    #[test]
    fn ptc_never_increases_residual_across_accepted_steps() {
        let sys = CubeRoot::new();
        let mu = DVector::from_element(1, 8.0);
        let cfg = NewtonConfig {
            continuation: Continuation::PseudoTransient,
            ptc_initial_step: 0.1,
            max_iters: 200,
            ..Default::default()
        };
        let sol = solve_primal(&sys, &mu, &DVector::from_element(1, 5.0), &cfg).unwrap();
        for w in sol.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "residual rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn adjoint_zero_when_qoi_ignores_state() {
        let sys = random_spd_system(12, 6, 2).with_constant_qoi(2.0);
        let mu = DVector::from_vec(vec![0.1, 0.1]);
        let sol = solve_primal(&sys, &mu, &DVector::zeros(6), &NewtonConfig::default()).unwrap();
        let lambda = solve_adjoint(&sys, &sol.u, &mu).unwrap();
        assert!(lambda.norm() == 0.0);
    }

    #[test]
    fn adjoint_matches_dense_solve_for_symmetric_jacobian() {
        // j = 1/2 u'u means the adjoint solves A' lambda = u, and A is
        // symmetric here.
        let sys = random_spd_system(13, 7, 2);
        let mu = DVector::from_vec(vec![0.5, 0.2]);
        let sol = solve_primal(&sys, &mu, &DVector::zeros(7), &NewtonConfig::default()).unwrap();
        let lambda = solve_adjoint(&sys, &sol.u, &mu).unwrap();
        let dense = sys.matrix().clone().lu().solve(&sol.u).unwrap();
        assert_relative_eq!(lambda, dense, epsilon = 1e-12);
    }

    #[test]
    fn adjoint_residual_vanishes_at_solution() {
        let sys = random_spd_system(14, 6, 3);
        let mu = DVector::from_vec(vec![0.3, -0.2, 0.7]);
        let sol = solve_primal(&sys, &mu, &DVector::zeros(6), &NewtonConfig::default()).unwrap();
        let lambda = solve_adjoint(&sys, &sol.u, &mu).unwrap();
        let jac = assembly::assemble_jacobian(&sys, &sol.u, &mu).unwrap().to_dense();
        let (gu, _) = assembly::assemble_qoi_derivatives(&sys, &sol.u, &mu).unwrap();
        let adj_res = jac.transpose() * &lambda - gu;
        assert!(adj_res.norm() <= 1e-10, "adjoint residual {}", adj_res.norm());
    }

    #[test]
    fn sensitivity_zero_for_mu_independent_residual() {
        let n = 5;
        let a = DMatrix::identity(n, n) * 2.0;
        let sys = LinearSystem::new(a, DMatrix::zeros(n, 2), DVector::from_element(n, 1.0));
        let mu = DVector::from_vec(vec![0.0, 0.0]);
        let sol = solve_primal(&sys, &mu, &DVector::zeros(n), &NewtonConfig::default()).unwrap();
        let sens = solve_sensitivity(&sys, &sol.u, &mu).unwrap();
        assert!(sens.norm() == 0.0);
    }

    #[test]
    fn sensitivity_matches_directional_differences_of_the_primal() {
        let sys = random_spd_system(15, 6, 2);
        let mu = DVector::from_vec(vec![0.4, -0.1]);
        let cfg = NewtonConfig::default();
        let sol = solve_primal(&sys, &mu, &DVector::zeros(6), &cfg).unwrap();
        let sens = solve_sensitivity(&sys, &sol.u, &mu).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut up = mu.clone();
            let mut dn = mu.clone();
            up[j] += h;
            dn[j] -= h;
            let u_up = solve_primal(&sys, &up, &sol.u, &cfg).unwrap().u;
            let u_dn = solve_primal(&sys, &dn, &sol.u, &cfg).unwrap().u;
            let fd = (u_up - u_dn) / (2.0 * h);
            let col = DVector::from_column_slice(sens.column(j).as_slice());
            assert_relative_eq!(col, fd, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn sensitivity_residual_vanishes_at_solution() {
        let sys = random_spd_system(16, 5, 2);
        let mu = DVector::from_vec(vec![0.2, 0.9]);
        let sol = solve_primal(&sys, &mu, &DVector::zeros(5), &NewtonConfig::default()).unwrap();
        let sens = solve_sensitivity(&sys, &sol.u, &mu).unwrap();
        let jac = assembly::assemble_jacobian(&sys, &sol.u, &mu).unwrap().to_dense();
        let jp = assembly::assemble_param_jacobian(&sys, &sol.u, &mu).unwrap();
        let res = &jac * &sens + jp;
        assert!(res.norm() <= 1e-10, "sensitivity residual {}", res.norm());
    }

    #[test]
    fn quartic_chain_has_closed_form_objective_and_gradient() {
        let sys = QuarticChain::new();
        let mu = DVector::from_element(1, 1.0);
        let eval =
            objective_and_gradient(&sys, &mu, &DVector::zeros(1), &NewtonConfig::default())
                .unwrap();
        assert_relative_eq!(eval.f, 1.0, epsilon = 1e-12);
        assert_relative_eq!(eval.gradient[0], 4.0, epsilon = 1e-10);
        let mu = DVector::from_element(1, 1.3);
        let eval =
            objective_and_gradient(&sys, &mu, &DVector::zeros(1), &NewtonConfig::default())
                .unwrap();
        assert_relative_eq!(eval.f, 1.3f64.powi(4), epsilon = 1e-10);
        assert_relative_eq!(eval.gradient[0], 4.0 * 1.3f64.powi(3), epsilon = 1e-9);
    }

    #[test]
    fn adjoint_gradient_equals_sensitivity_gradient() {
        let sys = random_spd_system(17, 7, 3);
        let mu = DVector::from_vec(vec![0.25, -0.5, 0.75]);
        let eval =
            objective_and_gradient(&sys, &mu, &DVector::zeros(7), &NewtonConfig::default())
                .unwrap();
        let sens = solve_sensitivity(&sys, &eval.u_star, &mu).unwrap();
        let (gu, gmu) = assembly::assemble_qoi_derivatives(&sys, &eval.u_star, &mu).unwrap();
        let via_sensitivity = gmu + sens.transpose() * gu;
        assert_relative_eq!(eval.gradient, via_sensitivity, epsilon = 1e-10);
    }
}
