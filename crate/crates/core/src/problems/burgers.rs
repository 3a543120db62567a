//! Steady viscous Burgers flow on `[0, 1]` with parametrized inflow and
//! source, and a target-matching quantity of interest.
//!
//! The discretization is piecewise-linear continuous Galerkin with 2-point
//! Gauss quadrature per element. Dirichlet values at both ends are
//! eliminated, so the element residuals are CG-style: every element touches
//! only its own dofs and the neighbor-dof blocks are empty. The first
//! parameter scales the inflow value, the remaining parameters are sine
//! source modes.
//!
//! `make_burgers` generates the tracking target by solving the system at a
//! chosen parameter point, so the objective has a known optimal value of
//! zero at that point.

use nalgebra::{DMatrix, DVector};

use crate::newton::{solve_primal, NewtonConfig};
use crate::system::{ElementConnectivity, ParamVec, StateVec, UnassembledSystem};
use crate::Result;

const INFLOW_GAIN: f64 = 0.5;
const INFLOW_BASE: f64 = 1.0;
const OUTFLOW: f64 = 0.0;

// 2-point Gauss rule on the reference element [0, 1].
const QP: [f64; 2] = [
    0.5 - 0.288_675_134_594_812_9, // (1 - 1/sqrt(3)) / 2
    0.5 + 0.288_675_134_594_812_9,
];

/// 1D Burgers inverse-design benchmark.
#[derive(Debug, Clone)]
pub struct BurgersProblem {
    n_elems: usize,
    n_mu: usize,
    nu: f64,
    h: f64,
    conn: ElementConnectivity,
    /// Nodal target values including the (frozen) boundary values, length
    /// `n_elems + 1`.
    target_nodes: Vec<f64>,
}

impl BurgersProblem {
    /// Builds the system with a zero tracking target.
    pub fn new(n_elems: usize, nu: f64, n_mu: usize) -> Self {
        assert!(n_elems >= 8, "at least 8 elements required");
        assert!(nu > 0.0, "viscosity must be positive");
        assert!(n_mu >= 1);
        let h = 1.0 / n_elems as f64;
        let own: Vec<Vec<usize>> = (0..n_elems)
            .map(|e| {
                if e == 0 {
                    vec![0]
                } else if e == n_elems - 1 {
                    vec![n_elems - 2]
                } else {
                    vec![e - 1, e]
                }
            })
            .collect();
        let nbr = vec![Vec::new(); n_elems];
        let vols = vec![h; n_elems];
        let conn = ElementConnectivity::new(n_elems - 1, own, nbr, vols, 1.0).unwrap();
        Self {
            n_elems,
            n_mu,
            nu,
            h,
            conn,
            target_nodes: vec![0.0; n_elems + 1],
        }
    }

    /// Replaces the tracking target (nodal values including boundaries).
    pub fn with_target(mut self, target_nodes: Vec<f64>) -> Self {
        assert_eq!(target_nodes.len(), self.n_elems + 1);
        self.target_nodes = target_nodes;
        self
    }

    /// Inflow boundary value at `mu`.
    pub fn inflow(&self, mu: &ParamVec) -> f64 {
        INFLOW_BASE + INFLOW_GAIN * mu[0]
    }

    /// Source term at position `x`.
    fn source(&self, x: f64, mu: &ParamVec) -> f64 {
        (1..self.n_mu)
            .map(|j| mu[j] * (j as f64 * std::f64::consts::PI * x).sin())
            .sum()
    }

    /// `∂s/∂mu_j` at position `x`.
    fn source_mode(&self, x: f64, j: usize) -> f64 {
        (j as f64 * std::f64::consts::PI * x).sin()
    }

    /// Endpoint values `(a, b)` of element `e` given its gathered own dofs.
    fn endpoints(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> (f64, f64) {
        if e == 0 {
            (self.inflow(mu), own[0])
        } else if e == self.n_elems - 1 {
            (own[0], OUTFLOW)
        } else {
            (own[0], own[1])
        }
    }

    /// Target endpoint values of element `e`.
    fn target_endpoints(&self, e: usize) -> (f64, f64) {
        (self.target_nodes[e], self.target_nodes[e + 1])
    }

    /// Which local endpoints (left, right) of element `e` are dofs.
    fn dof_endpoints(&self, e: usize) -> (bool, bool) {
        (e > 0, e < self.n_elems - 1)
    }

    /// Nodal values of the full state (boundaries included) at `(u, mu)`.
    pub fn full_state(&self, u: &StateVec, mu: &ParamVec) -> Vec<f64> {
        let mut nodes = Vec::with_capacity(self.n_elems + 1);
        nodes.push(self.inflow(mu));
        nodes.extend(u.iter().copied());
        nodes.push(OUTFLOW);
        nodes
    }

    /// Residual rows for element `e` at endpoint values `(a, b)`:
    /// `[row_left, row_right]` of the weak form, before selecting dof rows.
    fn raw_rows(&self, e: usize, a: f64, b: f64, mu: &ParamVec) -> [f64; 2] {
        let du = (b - a) / self.h;
        let x_left = e as f64 * self.h;
        let visc = self.nu * du;
        let mut rows = [-visc, visc];
        for &t in &QP {
            let w = 0.5 * self.h;
            let uq = a * (1.0 - t) + b * t;
            let xq = x_left + t * self.h;
            let common = w * (uq * du - self.source(xq, mu));
            rows[0] += common * (1.0 - t);
            rows[1] += common * t;
        }
        rows
    }

    /// `(∂rows/∂a, ∂rows/∂b)` at `(a, b)`.
    fn raw_rows_jac(&self, a: f64, b: f64) -> ([f64; 2], [f64; 2]) {
        let du = (b - a) / self.h;
        let mut da = [self.nu / self.h, -self.nu / self.h];
        let mut db = [-self.nu / self.h, self.nu / self.h];
        for &t in &QP {
            let w = 0.5 * self.h;
            let uq = a * (1.0 - t) + b * t;
            let d_da = w * ((1.0 - t) * du - uq / self.h);
            let d_db = w * (t * du + uq / self.h);
            da[0] += d_da * (1.0 - t);
            da[1] += d_da * t;
            db[0] += d_db * (1.0 - t);
            db[1] += d_db * t;
        }
        (da, db)
    }
}

impl UnassembledSystem for BurgersProblem {
    fn num_dofs(&self) -> usize {
        self.n_elems - 1
    }

    fn num_params(&self) -> usize {
        self.n_mu
    }

    fn connectivity(&self) -> &ElementConnectivity {
        &self.conn
    }

    fn element_residual(
        &self,
        e: usize,
        own: &DVector<f64>,
        _neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DVector<f64> {
        let (a, b) = self.endpoints(e, own, mu);
        let rows = self.raw_rows(e, a, b, mu);
        let (left, right) = self.dof_endpoints(e);
        let mut out = Vec::with_capacity(own.len());
        if left {
            out.push(rows[0]);
        }
        if right {
            out.push(rows[1]);
        }
        DVector::from_vec(out)
    }

    fn element_qoi(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> f64 {
        let (a, b) = self.endpoints(e, own, mu);
        let (at, bt) = self.target_endpoints(e);
        let mut acc = 0.0;
        for &t in &QP {
            let w = 0.5 * self.h;
            let diff = (a - at) * (1.0 - t) + (b - bt) * t;
            acc += 0.5 * w * diff * diff;
        }
        acc
    }

    fn element_residual_state_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        _neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = self.endpoints(e, own, mu);
        let (da, db) = self.raw_rows_jac(a, b);
        let (left, right) = self.dof_endpoints(e);
        let rows: Vec<usize> = [(left, 0usize), (right, 1usize)]
            .iter()
            .filter(|(is_dof, _)| *is_dof)
            .map(|(_, i)| *i)
            .collect();
        // Columns follow own-dof order: a first (when a is a dof), then b.
        let mut cols = Vec::new();
        if left {
            cols.push(&da);
        }
        if right {
            cols.push(&db);
        }
        let jac = DMatrix::from_fn(rows.len(), cols.len(), |i, j| cols[j][rows[i]]);
        (jac, DMatrix::zeros(rows.len(), 0))
    }

    fn element_residual_param_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        _neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DMatrix<f64> {
        let (a, b) = self.endpoints(e, own, mu);
        let (left, right) = self.dof_endpoints(e);
        let x_left = e as f64 * self.h;
        let mut raw = DMatrix::zeros(2, self.n_mu);
        // Source modes enter every element.
        for &t in &QP {
            let w = 0.5 * self.h;
            let xq = x_left + t * self.h;
            for j in 1..self.n_mu {
                let ds = -w * self.source_mode(xq, j);
                raw[(0, j)] += ds * (1.0 - t);
                raw[(1, j)] += ds * t;
            }
        }
        // The inflow value enters element 0 through its left endpoint.
        if e == 0 {
            let (da, _) = self.raw_rows_jac(a, b);
            raw[(0, 0)] += da[0] * INFLOW_GAIN;
            raw[(1, 0)] += da[1] * INFLOW_GAIN;
        }
        let rows: Vec<usize> = [(left, 0usize), (right, 1usize)]
            .iter()
            .filter(|(is_dof, _)| *is_dof)
            .map(|(_, i)| *i)
            .collect();
        DMatrix::from_fn(rows.len(), self.n_mu, |i, j| raw[(rows[i], j)])
    }

    fn element_qoi_state_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        let (a, b) = self.endpoints(e, own, mu);
        let (at, bt) = self.target_endpoints(e);
        let mut ga = 0.0;
        let mut gb = 0.0;
        for &t in &QP {
            let w = 0.5 * self.h;
            let diff = (a - at) * (1.0 - t) + (b - bt) * t;
            ga += w * diff * (1.0 - t);
            gb += w * diff * t;
        }
        let (left, right) = self.dof_endpoints(e);
        let mut out = Vec::with_capacity(own.len());
        if left {
            out.push(ga);
        }
        if right {
            out.push(gb);
        }
        DVector::from_vec(out)
    }

    fn element_qoi_param_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_mu);
        if e == 0 {
            let (a, b) = self.endpoints(e, own, mu);
            let (at, bt) = self.target_endpoints(e);
            for &t in &QP {
                let w = 0.5 * self.h;
                let diff = (a - at) * (1.0 - t) + (b - bt) * t;
                g[0] += w * diff * (1.0 - t) * INFLOW_GAIN;
            }
        }
        g
    }
}

/// Builds the Burgers benchmark: generates the tracking target by solving
/// at `target_mu`, so `f(target_mu) = 0` exactly. Returns the system and
/// the starting parameter point (the origin).
pub fn make_burgers(
    n_elems: usize,
    nu: f64,
    n_mu: usize,
    target_mu: &ParamVec,
) -> Result<(BurgersProblem, ParamVec)> {
    assert_eq!(target_mu.len(), n_mu);
    let bare = BurgersProblem::new(n_elems, nu, n_mu);
    let guess = ramp_guess(&bare, target_mu);
    let cfg = NewtonConfig { max_iters: 100, ..Default::default() };
    let sol = solve_primal(&bare, target_mu, &guess, &cfg)?;
    let target_nodes = bare.full_state(&sol.u, target_mu);
    let problem = bare.with_target(target_nodes);
    Ok((problem, DVector::zeros(n_mu)))
}

/// Linear interpolation between the boundary values, restricted to the
/// interior dofs; a serviceable cold-start guess.
pub fn ramp_guess(problem: &BurgersProblem, mu: &ParamVec) -> StateVec {
    let n = problem.num_dofs();
    let g_l = problem.inflow(mu);
    DVector::from_fn(n, |i, _| {
        let x = (i + 1) as f64 / (n + 1) as f64;
        g_l * (1.0 - x) + OUTFLOW * x
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_qoi, assemble_residual};
    use crate::newton::objective_and_gradient;
    use crate::system::verify_element_derivatives;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn target_mu() -> ParamVec {
        DVector::from_vec(vec![0.8, -0.6, 0.4, 0.5])
    }

    /// Dense single-loop reference assembler: gathers endpoint values
    /// directly from the full nodal vector and adds weak-form rows into a
    /// dense residual, with no connectivity or scatter machinery.
    fn dense_reference_residual(p: &BurgersProblem, u: &StateVec, mu: &ParamVec) -> DVector<f64> {
        let nodes = p.full_state(u, mu);
        let n_elems = nodes.len() - 1;
        let h = 1.0 / n_elems as f64;
        let mut r = DVector::zeros(n_elems + 1);
        for e in 0..n_elems {
            let (a, b) = (nodes[e], nodes[e + 1]);
            let du = (b - a) / h;
            let mut rows = [-p.nu * du, p.nu * du];
            for &t in &QP {
                let w = 0.5 * h;
                let uq = a * (1.0 - t) + b * t;
                let xq = (e as f64 + t) * h;
                let common = w * (uq * du - p.source(xq, mu));
                rows[0] += common * (1.0 - t);
                rows[1] += common * t;
            }
            r[e] += rows[0];
            r[e + 1] += rows[1];
        }
        // Interior rows only.
        DVector::from_fn(n_elems - 1, |i, _| r[i + 1])
    }

    #[test]
    fn assembled_residual_matches_dense_reference() {
        let p = BurgersProblem::new(24, 0.1, 4);
        let mu = DVector::from_vec(vec![0.3, -0.5, 0.2, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let u = DVector::from_fn(p.num_dofs(), |_, _| rng.random_range(-1.0..1.5));
            let assembled = assemble_residual(&p, &u, &mu).unwrap();
            let reference = dense_reference_residual(&p, &u, &mu);
            let scale = reference.norm().max(1.0);
            assert!(
                (assembled - reference).norm() <= 1e-13 * scale,
                "assembled residual deviates from dense reference"
            );
        }
    }

    #[test]
    fn derivative_callbacks_pass_fd_check() {
        let p = BurgersProblem::new(16, 0.08, 4).with_target(
            (0..17).map(|i| (i as f64 * 0.3).sin()).collect(),
        );
        let mu = DVector::from_vec(vec![0.4, -0.2, 0.6, -0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let u = DVector::from_fn(p.num_dofs(), |_, _| rng.random_range(-0.5..1.2));
        let elements: Vec<usize> = (0..p.num_elements()).collect();
        verify_element_derivatives(&p, &u, &mu, &elements, 1e-6, 1e-5).unwrap();
    }

    #[test]
    fn objective_vanishes_at_the_target_parameters() {
        let (p, _) = make_burgers(32, 0.1, 4, &target_mu()).unwrap();
        let cfg = NewtonConfig::default();
        let guess = ramp_guess(&p, &target_mu());
        let sol = solve_primal(&p, &target_mu(), &guess, &cfg).unwrap();
        let f = assemble_qoi(&p, &sol.u, &target_mu()).unwrap();
        assert!(f.abs() <= 1e-12, "f(target) = {f:.3e}");
    }

    #[test]
    fn gradient_vanishes_at_the_target_parameters() {
        let (p, _) = make_burgers(32, 0.1, 4, &target_mu()).unwrap();
        let guess = ramp_guess(&p, &target_mu());
        let eval =
            objective_and_gradient(&p, &target_mu(), &guess, &NewtonConfig::default()).unwrap();
        assert!(eval.gradient.norm() <= 1e-8, "grad {:.3e}", eval.gradient.norm());
    }

    #[test]
    fn gradient_matches_finite_differences_at_the_start() {
        let (p, mu0) = make_burgers(24, 0.1, 4, &target_mu()).unwrap();
        let cfg = NewtonConfig::default();
        let guess = ramp_guess(&p, &mu0);
        let eval = objective_and_gradient(&p, &mu0, &guess, &cfg).unwrap();
        let h = 1e-7;
        for j in 0..4 {
            let mut up = mu0.clone();
            let mut dn = mu0.clone();
            up[j] += h;
            dn[j] -= h;
            let fu = objective_and_gradient(&p, &up, &eval.u_star, &cfg).unwrap().f;
            let fd_val = objective_and_gradient(&p, &dn, &eval.u_star, &cfg).unwrap().f;
            let fd = (fu - fd_val) / (2.0 * h);
            assert_relative_eq!(eval.gradient[j], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }
}
