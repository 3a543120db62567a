//! Linear system fixture: `r(u, mu) = A u - (B mu + b0)`.
//!
//! Element `e` is row `e` of the matrix, so the fixture exercises nonempty
//! neighbor-dof blocks: the diagonal entry acts on the element's own dof and
//! the off-diagonal entries act on neighbor dofs. Linearity makes exact
//! expectations possible in tests.

use nalgebra::{DMatrix, DVector};

use crate::system::{ElementConnectivity, ParamVec, UnassembledSystem};

#[derive(Debug, Clone)]
enum Qoi {
    /// `j = 1/2 (u - target)' diag(mass) (u - target)`.
    Tracking { mass: DVector<f64>, target: DVector<f64> },
    /// `j_e = c |Omega_e|`, so the total is `c |Omega|`.
    ConstantIntegrand(f64),
}

/// Dense linear system in unassembled row-per-element form.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b_mu: DMatrix<f64>,
    b0: DVector<f64>,
    conn: ElementConnectivity,
    qoi: Qoi,
}

impl LinearSystem {
    /// Builds the system `A u = B mu + b0` with one element per row.
    pub fn new(a: DMatrix<f64>, b_mu: DMatrix<f64>, b0: DVector<f64>) -> Self {
        let n = a.nrows();
        assert_eq!(a.ncols(), n);
        assert_eq!(b_mu.nrows(), n);
        assert_eq!(b0.len(), n);
        let own = (0..n).map(|e| vec![e]).collect();
        let nbr = (0..n)
            .map(|e| (0..n).filter(|&j| j != e).collect())
            .collect();
        let vols = vec![1.0 / n as f64; n];
        let conn = ElementConnectivity::new(n, own, nbr, vols, 1.0).unwrap();
        Self {
            a,
            b_mu,
            b0,
            conn,
            qoi: Qoi::Tracking {
                mass: DVector::from_element(n, 1.0),
                target: DVector::zeros(n),
            },
        }
    }

    /// Switches the QoI to `1/2 ||u - target||^2`.
    pub fn with_tracking_qoi(mut self, target: DVector<f64>) -> Self {
        let n = self.a.nrows();
        self.qoi = Qoi::Tracking {
            mass: DVector::from_element(n, 1.0),
            target,
        };
        self
    }

    /// Switches the QoI to the constant integrand `c` (element term
    /// `c |Omega_e|`).
    pub fn with_constant_qoi(mut self, c: f64) -> Self {
        self.qoi = Qoi::ConstantIntegrand(c);
        self
    }

    /// The system matrix `A`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Right-hand side `B mu + b0`.
    pub fn rhs(&self, mu: &ParamVec) -> DVector<f64> {
        &self.b_mu * mu + &self.b0
    }
}

impl UnassembledSystem for LinearSystem {
    fn num_dofs(&self) -> usize {
        self.a.nrows()
    }

    fn num_params(&self) -> usize {
        self.b_mu.ncols()
    }

    fn connectivity(&self) -> &ElementConnectivity {
        &self.conn
    }

    fn element_residual(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DVector<f64> {
        let mut acc = self.a[(e, e)] * own[0];
        for (k, &j) in self.conn.neighbor_dofs(e).iter().enumerate() {
            acc += self.a[(e, j)] * neighbor[k];
        }
        let rhs_e = self.b_mu.row(e).transpose().dot(mu) + self.b0[e];
        DVector::from_element(1, acc - rhs_e)
    }

    fn element_qoi(&self, e: usize, own: &DVector<f64>, _mu: &ParamVec) -> f64 {
        match &self.qoi {
            Qoi::Tracking { mass, target } => {
                0.5 * mass[e] * (own[0] - target[e]).powi(2)
            }
            Qoi::ConstantIntegrand(c) => c * self.conn.element_volume(e),
        }
    }

    fn element_residual_state_jac(
        &self,
        e: usize,
        _own: &DVector<f64>,
        _neighbor: &DVector<f64>,
        _mu: &ParamVec,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let j_own = DMatrix::from_element(1, 1, self.a[(e, e)]);
        let nbr = self.conn.neighbor_dofs(e);
        let j_nbr = DMatrix::from_fn(1, nbr.len(), |_, k| self.a[(e, nbr[k])]);
        (j_own, j_nbr)
    }

    fn element_residual_param_jac(
        &self,
        e: usize,
        _own: &DVector<f64>,
        _neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DMatrix<f64> {
        DMatrix::from_fn(1, mu.len(), |_, j| -self.b_mu[(e, j)])
    }

    fn element_qoi_state_grad(&self, e: usize, own: &DVector<f64>, _mu: &ParamVec) -> DVector<f64> {
        match &self.qoi {
            Qoi::Tracking { mass, target } => {
                DVector::from_element(1, mass[e] * (own[0] - target[e]))
            }
            Qoi::ConstantIntegrand(_) => DVector::zeros(1),
        }
    }

    fn element_qoi_param_grad(&self, _e: usize, _own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        DVector::zeros(mu.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_qoi;
    use crate::system::verify_element_derivatives;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn constant_integrand_sums_to_domain_volume_times_constant() {
        let n = 9;
        let sys = LinearSystem::new(
            DMatrix::identity(n, n),
            DMatrix::zeros(n, 1),
            DVector::zeros(n),
        )
        .with_constant_qoi(3.25);
        let j = assemble_qoi(&sys, &DVector::zeros(n), &DVector::zeros(1)).unwrap();
        assert_relative_eq!(j, 3.25 * sys.connectivity().domain_volume(), epsilon = 1e-14);
    }

    #[test]
    fn derivative_callbacks_pass_fd_check() {
        let n = 5;
        let a = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let b_mu = DMatrix::from_fn(n, 2, |i, j| (i + j) as f64 * 0.1);
        let sys = LinearSystem::new(a, b_mu, DVector::from_element(n, 0.2))
            .with_tracking_qoi(DVector::from_element(n, 0.5));
        let u = DVector::from_fn(n, |i, _| (i as f64 * 0.9).cos());
        let mu = DVector::from_vec(vec![0.4, -0.3]);
        let elements: Vec<usize> = (0..n).collect();
        verify_element_derivatives(&sys, &u, &mu, &elements, 1e-6, 1e-5).unwrap();
    }
}
