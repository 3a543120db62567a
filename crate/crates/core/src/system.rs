//! The unassembled parametrized nonlinear system abstraction.
//!
//! A system is a collection of elements, each contributing a small residual
//! block `r_e(u_e, u_e', mu)` and a scalar quantity-of-interest term
//! `j_e(u_e, mu)`, together with assembly maps that gather element degrees
//! of freedom from the global state and scatter contributions back. All
//! global quantities (residual, Jacobian, QoI, derivatives) are sums over
//! elements, which is the structure the hyperreduction machinery exploits.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Global state vector, length `N_u`.
pub type StateVec = DVector<f64>;
/// System parameter vector, length `N_mu`.
pub type ParamVec = DVector<f64>;

/// Componentwise box bounds on the parameter vector.
#[derive(Debug, Clone)]
pub struct ParameterBounds {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ParameterBounds {
    /// Creates bounds, checking `lower <= upper` componentwise.
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Contract(
                "bound vectors must have equal length".into(),
            ));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::Contract(
                "lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Number of bounded parameters.
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Projects `mu` onto the box.
    pub fn project(&self, mu: &ParamVec) -> ParamVec {
        DVector::from_fn(mu.len(), |i, _| mu[i].clamp(self.lower[i], self.upper[i]))
    }

    /// True when `mu` lies inside the box (inclusive).
    pub fn contains(&self, mu: &ParamVec) -> bool {
        mu.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

/// Assembly maps and element measures for an unassembled system.
///
/// `own_dofs[e]` lists the global indices gathered into `u_e` (the map
/// `P_e`), `neighbor_dofs[e]` the indices gathered into `u_e'` (the map
/// `P_e'`, empty for continuous-Galerkin style systems).
#[derive(Debug, Clone)]
pub struct ElementConnectivity {
    num_dofs: usize,
    own_dofs: Vec<Vec<usize>>,
    neighbor_dofs: Vec<Vec<usize>>,
    element_volume: Vec<f64>,
    domain_volume: f64,
}

impl ElementConnectivity {
    /// Validates and stores the assembly maps.
    pub fn new(
        num_dofs: usize,
        own_dofs: Vec<Vec<usize>>,
        neighbor_dofs: Vec<Vec<usize>>,
        element_volume: Vec<f64>,
        domain_volume: f64,
    ) -> Result<Self> {
        let ne = own_dofs.len();
        if neighbor_dofs.len() != ne || element_volume.len() != ne {
            return Err(Error::Contract(format!(
                "connectivity arrays disagree on element count: {} own, {} neighbor, {} volumes",
                ne,
                neighbor_dofs.len(),
                element_volume.len()
            )));
        }
        for (e, dofs) in own_dofs.iter().enumerate() {
            let mut seen = dofs.clone();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Contract(format!(
                    "element {e} lists a duplicate own dof"
                )));
            }
            if dofs.iter().chain(neighbor_dofs[e].iter()).any(|&d| d >= num_dofs) {
                return Err(Error::Contract(format!(
                    "element {e} references a dof outside [0, {num_dofs})"
                )));
            }
        }
        if element_volume.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Contract("element volumes must be nonnegative".into()));
        }
        let total: f64 = element_volume.iter().sum();
        if (total - domain_volume).abs() > 1e-12 * domain_volume.abs().max(1.0) {
            return Err(Error::Contract(format!(
                "element volumes sum to {total:.15e}, expected {domain_volume:.15e}"
            )));
        }
        Ok(Self {
            num_dofs,
            own_dofs,
            neighbor_dofs,
            element_volume,
            domain_volume,
        })
    }

    /// Global state dimension `N_u`.
    pub fn num_dofs(&self) -> usize {
        self.num_dofs
    }

    /// Number of elements `N_e`.
    pub fn num_elements(&self) -> usize {
        self.own_dofs.len()
    }

    /// Global indices of the dofs owned by element `e`.
    pub fn own_dofs(&self, e: usize) -> &[usize] {
        &self.own_dofs[e]
    }

    /// Global indices of the neighbor dofs of element `e`.
    pub fn neighbor_dofs(&self, e: usize) -> &[usize] {
        &self.neighbor_dofs[e]
    }

    /// Measure of element `e`.
    pub fn element_volume(&self, e: usize) -> f64 {
        self.element_volume[e]
    }

    /// All element measures.
    pub fn element_volumes(&self) -> &[f64] {
        &self.element_volume
    }

    /// Measure of the whole domain.
    pub fn domain_volume(&self) -> f64 {
        self.domain_volume
    }

    /// Gathers `u_e = P_e^T u`.
    pub fn gather_own(&self, e: usize, u: &StateVec) -> DVector<f64> {
        DVector::from_iterator(
            self.own_dofs[e].len(),
            self.own_dofs[e].iter().map(|&d| u[d]),
        )
    }

    /// Gathers `u_e' = (P_e')^T u`.
    pub fn gather_neighbor(&self, e: usize, u: &StateVec) -> DVector<f64> {
        DVector::from_iterator(
            self.neighbor_dofs[e].len(),
            self.neighbor_dofs[e].iter().map(|&d| u[d]),
        )
    }
}

/// A parametrized nonlinear system in unassembled (per-element) form.
///
/// Implementations provide values and first derivatives of the element
/// residual and QoI contributions. Callbacks must be pure: evaluation order
/// across elements is unspecified and may be concurrent.
pub trait UnassembledSystem: Sync {
    /// Global state dimension `N_u`.
    fn num_dofs(&self) -> usize;
    /// Parameter dimension `N_mu`.
    fn num_params(&self) -> usize;
    /// Assembly maps and element measures.
    fn connectivity(&self) -> &ElementConnectivity;

    /// Element residual `r_e(u_e, u_e', mu)`, length `own_dofs(e).len()`.
    fn element_residual(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DVector<f64>;

    /// Element QoI contribution `j_e(u_e, mu)`.
    fn element_qoi(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> f64;

    /// `(∂r_e/∂u_e, ∂r_e/∂u_e')`.
    fn element_residual_state_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> (DMatrix<f64>, DMatrix<f64>);

    /// `∂r_e/∂mu`, shape `own_dofs(e).len() x N_mu`.
    fn element_residual_param_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DMatrix<f64>;

    /// `∂j_e/∂u_e` as a column vector.
    fn element_qoi_state_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64>;

    /// `∂j_e/∂mu` as a column vector.
    fn element_qoi_param_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64>;

    /// Number of elements `N_e`.
    fn num_elements(&self) -> usize {
        self.connectivity().num_elements()
    }
}

impl<S: UnassembledSystem + ?Sized> UnassembledSystem for &S {
    fn num_dofs(&self) -> usize {
        (**self).num_dofs()
    }
    fn num_params(&self) -> usize {
        (**self).num_params()
    }
    fn connectivity(&self) -> &ElementConnectivity {
        (**self).connectivity()
    }
    fn element_residual(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DVector<f64> {
        (**self).element_residual(e, own, neighbor, mu)
    }
    fn element_qoi(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> f64 {
        (**self).element_qoi(e, own, mu)
    }
    fn element_residual_state_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        (**self).element_residual_state_jac(e, own, neighbor, mu)
    }
    fn element_residual_param_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DMatrix<f64> {
        (**self).element_residual_param_jac(e, own, neighbor, mu)
    }
    fn element_qoi_state_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        (**self).element_qoi_state_grad(e, own, mu)
    }
    fn element_qoi_param_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        (**self).element_qoi_param_grad(e, own, mu)
    }
}

/// Wraps a system and counts element residual evaluations.
///
/// Used to check that sparse-weight evaluations really skip zero-weight
/// elements.
pub struct CountingSystem<S> {
    inner: S,
    residual_calls: AtomicU64,
    qoi_calls: AtomicU64,
}

impl<S: UnassembledSystem> CountingSystem<S> {
    /// Wraps `inner` with zeroed counters.
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            residual_calls: AtomicU64::new(0),
            qoi_calls: AtomicU64::new(0),
        }
    }

    /// Element residual evaluations so far (values and derivatives).
    pub fn residual_calls(&self) -> u64 {
        self.residual_calls.load(Ordering::Relaxed)
    }

    /// Element QoI evaluations so far (values and derivatives).
    pub fn qoi_calls(&self) -> u64 {
        self.qoi_calls.load(Ordering::Relaxed)
    }

    /// Resets both counters.
    pub fn reset(&self) {
        self.residual_calls.store(0, Ordering::Relaxed);
        self.qoi_calls.store(0, Ordering::Relaxed);
    }
}

impl<S: UnassembledSystem> UnassembledSystem for CountingSystem<S> {
    fn num_dofs(&self) -> usize {
        self.inner.num_dofs()
    }
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
    fn connectivity(&self) -> &ElementConnectivity {
        self.inner.connectivity()
    }
    fn element_residual(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DVector<f64> {
        self.residual_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.element_residual(e, own, neighbor, mu)
    }
    fn element_qoi(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> f64 {
        self.qoi_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.element_qoi(e, own, mu)
    }
    fn element_residual_state_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        self.residual_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.element_residual_state_jac(e, own, neighbor, mu)
    }
    fn element_residual_param_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DMatrix<f64> {
        self.residual_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.element_residual_param_jac(e, own, neighbor, mu)
    }
    fn element_qoi_state_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        self.qoi_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.element_qoi_state_grad(e, own, mu)
    }
    fn element_qoi_param_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        self.qoi_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.element_qoi_param_grad(e, own, mu)
    }
}

/// Checks every derivative callback of `sys` against central finite
/// differences of the corresponding value callback, at state `u` and
/// parameters `mu`, over the given elements.
///
/// The comparison is relative: `|fd - analytic| <= tol * max(1, |analytic|)`
/// blockwise. Returns the first offending element and derivative name.
pub fn verify_element_derivatives<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
    elements: &[usize],
    step: f64,
    tol: f64,
) -> Result<()> {
    let conn = sys.connectivity();
    let check = |err: f64, scale: f64, e: usize, what: &'static str| -> Result<()> {
        if err <= tol * scale.max(1.0) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "element {e}: {what} disagrees with finite differences \
                 (error {err:.3e}, scale {scale:.3e})"
            )))
        }
    };
    for &e in elements {
        let own = conn.gather_own(e, u);
        let nbr = conn.gather_neighbor(e, u);

        let (jac_own, jac_nbr) = sys.element_residual_state_jac(e, &own, &nbr, mu);
        let mut fd_own = DMatrix::zeros(own.len(), own.len());
        for j in 0..own.len() {
            let mut p = own.clone();
            let mut m = own.clone();
            p[j] += step;
            m[j] -= step;
            let d = (sys.element_residual(e, &p, &nbr, mu)
                - sys.element_residual(e, &m, &nbr, mu))
                / (2.0 * step);
            fd_own.set_column(j, &d);
        }
        check(
            (&fd_own - &jac_own).norm(),
            jac_own.norm(),
            e,
            "residual state Jacobian (own dofs)",
        )?;

        let mut fd_nbr = DMatrix::zeros(own.len(), nbr.len());
        for j in 0..nbr.len() {
            let mut p = nbr.clone();
            let mut m = nbr.clone();
            p[j] += step;
            m[j] -= step;
            let d = (sys.element_residual(e, &own, &p, mu)
                - sys.element_residual(e, &own, &m, mu))
                / (2.0 * step);
            fd_nbr.set_column(j, &d);
        }
        check(
            (&fd_nbr - &jac_nbr).norm(),
            jac_nbr.norm(),
            e,
            "residual state Jacobian (neighbor dofs)",
        )?;

        let jac_mu = sys.element_residual_param_jac(e, &own, &nbr, mu);
        let mut fd_mu = DMatrix::zeros(own.len(), mu.len());
        for j in 0..mu.len() {
            let mut p = mu.clone();
            let mut m = mu.clone();
            p[j] += step;
            m[j] -= step;
            let d = (sys.element_residual(e, &own, &nbr, &p)
                - sys.element_residual(e, &own, &nbr, &m))
                / (2.0 * step);
            fd_mu.set_column(j, &d);
        }
        check(
            (&fd_mu - &jac_mu).norm(),
            jac_mu.norm(),
            e,
            "residual parameter Jacobian",
        )?;

        let g_state = sys.element_qoi_state_grad(e, &own, mu);
        let fd_state = DVector::from_fn(own.len(), |j, _| {
            let mut p = own.clone();
            let mut m = own.clone();
            p[j] += step;
            m[j] -= step;
            (sys.element_qoi(e, &p, mu) - sys.element_qoi(e, &m, mu)) / (2.0 * step)
        });
        check(
            (&fd_state - &g_state).norm(),
            g_state.norm(),
            e,
            "QoI state gradient",
        )?;

        let g_mu = sys.element_qoi_param_grad(e, &own, mu);
        let fd_param = DVector::from_fn(mu.len(), |j, _| {
            let mut p = mu.clone();
            let mut m = mu.clone();
            p[j] += step;
            m[j] -= step;
            (sys.element_qoi(e, &own, &p) - sys.element_qoi(e, &own, &m)) / (2.0 * step)
        });
        check(
            (&fd_param - &g_mu).norm(),
            g_mu.norm(),
            e,
            "QoI parameter gradient",
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn connectivity_rejects_duplicate_own_dofs() {
        let err = ElementConnectivity::new(3, vec![vec![0, 0]], vec![vec![]], vec![1.0], 1.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn connectivity_rejects_out_of_range_indices() {
        let err = ElementConnectivity::new(2, vec![vec![0, 2]], vec![vec![]], vec![1.0], 1.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn connectivity_rejects_volume_mismatch() {
        let err = ElementConnectivity::new(
            3,
            vec![vec![0], vec![1]],
            vec![vec![], vec![]],
            vec![0.5, 0.4],
            1.0,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn gather_round_trips_indices() {
        let conn = ElementConnectivity::new(
            4,
            vec![vec![2, 0], vec![1, 3]],
            vec![vec![3], vec![0]],
            vec![0.5, 0.5],
            1.0,
        )
        .unwrap();
        let u = DVector::from_vec(vec![10.0, 11.0, 12.0, 13.0]);
        assert_eq!(conn.gather_own(0, &u).as_slice(), &[12.0, 10.0]);
        assert_eq!(conn.gather_neighbor(1, &u).as_slice(), &[10.0]);
    }

    #[test]
    fn bounds_project_componentwise() {
        let b = ParameterBounds::new(
            DVector::from_vec(vec![-1.0, 0.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        let p = b.project(&DVector::from_vec(vec![-3.0, 1.5]));
        assert_eq!(p.as_slice(), &[-1.0, 1.5]);
        assert!(b.contains(&p));
    }

    #[test]
    fn bounds_reject_crossed_limits() {
        let err = ParameterBounds::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![0.0]),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
