//! Assembly of global quantities from element contributions.
//!
//! Every operation here has the same shape: evaluate pure element callbacks
//! (in parallel when the `parallel` feature is on), then scatter-add the
//! blocks into the global object sequentially in element order. The ordered
//! scatter keeps results bit-identical between the parallel and sequential
//! paths.
//!
//! The `*_seq` variants always run the sequential path; they back the
//! benchmark comparison and the no-`parallel` build.

use nalgebra::{DMatrix, DVector};

use crate::linalg::CsrMatrix;
use crate::system::{ParamVec, StateVec, UnassembledSystem};
use crate::{Error, Result};

/// Runs `f` over `0..ne`, parallel when enabled, preserving index order in
/// the returned vector.
pub(crate) fn map_elements<T, F>(ne: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..ne).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..ne).map(f).collect()
    }
}

/// Sequential twin of [`map_elements`].
pub(crate) fn map_elements_seq<T, F>(ne: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T>,
{
    (0..ne).map(f).collect()
}

fn check_dims<S: UnassembledSystem + ?Sized>(sys: &S, u: &StateVec, mu: &ParamVec) -> Result<()> {
    if u.len() != sys.num_dofs() {
        return Err(Error::Contract(format!(
            "state has length {}, system declares N_u = {}",
            u.len(),
            sys.num_dofs()
        )));
    }
    if mu.len() != sys.num_params() {
        return Err(Error::Contract(format!(
            "parameter vector has length {}, system declares N_mu = {}",
            mu.len(),
            sys.num_params()
        )));
    }
    Ok(())
}

fn finite_vec(v: &DVector<f64>, quantity: &'static str, e: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteElement { quantity, element: e })
    }
}

fn finite_mat(m: &DMatrix<f64>, quantity: &'static str, e: usize) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteElement { quantity, element: e })
    }
}

fn residual_blocks<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
    sequential: bool,
) -> Result<Vec<DVector<f64>>> {
    let conn = sys.connectivity();
    let eval = |e: usize| -> Result<DVector<f64>> {
        let own = conn.gather_own(e, u);
        let nbr = conn.gather_neighbor(e, u);
        let r = sys.element_residual(e, &own, &nbr, mu);
        debug_assert_eq!(r.len(), own.len(), "element {e} residual length");
        finite_vec(&r, "residual", e)?;
        Ok(r)
    };
    if sequential {
        map_elements_seq(sys.num_elements(), eval)
    } else {
        map_elements(sys.num_elements(), eval)
    }
}

fn scatter_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    blocks: Vec<DVector<f64>>,
) -> StateVec {
    let conn = sys.connectivity();
    let mut r = DVector::zeros(sys.num_dofs());
    for (e, block) in blocks.into_iter().enumerate() {
        for (local, &dof) in conn.own_dofs(e).iter().enumerate() {
            r[dof] += block[local];
        }
    }
    r
}

/// Assembles the global residual `r(u, mu) = Σ_e P_e r_e`.
pub fn assemble_residual<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<StateVec> {
    check_dims(sys, u, mu)?;
    Ok(scatter_residual(sys, residual_blocks(sys, u, mu, false)?))
}

/// Sequential variant of [`assemble_residual`].
pub fn assemble_residual_seq<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<StateVec> {
    check_dims(sys, u, mu)?;
    Ok(scatter_residual(sys, residual_blocks(sys, u, mu, true)?))
}

fn jacobian_blocks<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
    sequential: bool,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let conn = sys.connectivity();
    let eval = |e: usize| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let own = conn.gather_own(e, u);
        let nbr = conn.gather_neighbor(e, u);
        let (j_own, j_nbr) = sys.element_residual_state_jac(e, &own, &nbr, mu);
        finite_mat(&j_own, "state Jacobian", e)?;
        finite_mat(&j_nbr, "state Jacobian", e)?;
        Ok((j_own, j_nbr))
    };
    if sequential {
        map_elements_seq(sys.num_elements(), eval)
    } else {
        map_elements(sys.num_elements(), eval)
    }
}

/// Refreshes the values of `jac` (pattern from
/// [`CsrMatrix::pattern_from_connectivity`]) with the Jacobian at `(u, mu)`.
pub fn assemble_jacobian_into<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
    jac: &mut CsrMatrix,
) -> Result<()> {
    check_dims(sys, u, mu)?;
    let blocks = jacobian_blocks(sys, u, mu, false)?;
    let conn = sys.connectivity();
    jac.zero_values();
    for (e, (j_own, j_nbr)) in blocks.into_iter().enumerate() {
        let own = conn.own_dofs(e);
        let nbr = conn.neighbor_dofs(e);
        for (li, &row) in own.iter().enumerate() {
            for (lj, &col) in own.iter().enumerate() {
                jac.add(row, col, j_own[(li, lj)]);
            }
            for (lj, &col) in nbr.iter().enumerate() {
                jac.add(row, col, j_nbr[(li, lj)]);
            }
        }
    }
    Ok(())
}

/// Assembles the sparse state Jacobian `∂r/∂u`.
pub fn assemble_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<CsrMatrix> {
    let mut jac = CsrMatrix::pattern_from_connectivity(sys.connectivity());
    assemble_jacobian_into(sys, u, mu, &mut jac)?;
    Ok(jac)
}

/// Assembles the scalar QoI `j(u, mu) = Σ_e j_e`.
pub fn assemble_qoi<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<f64> {
    check_dims(sys, u, mu)?;
    let conn = sys.connectivity();
    let terms = map_elements(sys.num_elements(), |e| {
        let own = conn.gather_own(e, u);
        let j = sys.element_qoi(e, &own, mu);
        if j.is_finite() {
            Ok(j)
        } else {
            Err(Error::NonFiniteElement { quantity: "QoI", element: e })
        }
    })?;
    Ok(terms.iter().sum())
}

/// Assembles `(∂j/∂u, ∂j/∂mu)` as column vectors of lengths `N_u`, `N_mu`.
pub fn assemble_qoi_derivatives<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dims(sys, u, mu)?;
    let conn = sys.connectivity();
    let blocks = map_elements(sys.num_elements(), |e| {
        let own = conn.gather_own(e, u);
        let gs = sys.element_qoi_state_grad(e, &own, mu);
        let gp = sys.element_qoi_param_grad(e, &own, mu);
        finite_vec(&gs, "QoI state gradient", e)?;
        finite_vec(&gp, "QoI parameter gradient", e)?;
        Ok((gs, gp))
    })?;
    let mut state_grad = DVector::zeros(sys.num_dofs());
    let mut param_grad = DVector::zeros(sys.num_params());
    for (e, (gs, gp)) in blocks.into_iter().enumerate() {
        for (local, &dof) in conn.own_dofs(e).iter().enumerate() {
            state_grad[dof] += gs[local];
        }
        param_grad += gp;
    }
    Ok((state_grad, param_grad))
}

/// Assembles the parameter Jacobian `∂r/∂mu`, shape `N_u x N_mu`.
pub fn assemble_param_jacobian<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<DMatrix<f64>> {
    check_dims(sys, u, mu)?;
    let conn = sys.connectivity();
    let blocks = map_elements(sys.num_elements(), |e| {
        let own = conn.gather_own(e, u);
        let nbr = conn.gather_neighbor(e, u);
        let jp = sys.element_residual_param_jac(e, &own, &nbr, mu);
        finite_mat(&jp, "parameter Jacobian", e)?;
        Ok(jp)
    })?;
    let mut out = DMatrix::zeros(sys.num_dofs(), sys.num_params());
    for (e, block) in blocks.into_iter().enumerate() {
        for (li, &row) in conn.own_dofs(e).iter().enumerate() {
            for j in 0..sys.num_params() {
                out[(row, j)] += block[(li, j)];
            }
        }
    }
    Ok(out)
}

/// All global quantities at one `(u, mu)` point.
#[derive(Debug, Clone)]
pub struct GlobalEvaluation {
    /// Residual `r(u, mu)`.
    pub residual: StateVec,
    /// State Jacobian `∂r/∂u`.
    pub jacobian: CsrMatrix,
    /// QoI value `j(u, mu)`.
    pub qoi: f64,
    /// QoI state gradient `∂j/∂u` (length `N_u`).
    pub qoi_state_grad: DVector<f64>,
    /// QoI parameter gradient `∂j/∂mu` (length `N_mu`).
    pub qoi_param_grad: DVector<f64>,
    /// Residual parameter Jacobian `∂r/∂mu` (`N_u x N_mu`).
    pub residual_param_jac: DMatrix<f64>,
}

/// Evaluates every global quantity at `(u, mu)`.
pub fn evaluate_all<S: UnassembledSystem + ?Sized>(
    sys: &S,
    u: &StateVec,
    mu: &ParamVec,
) -> Result<GlobalEvaluation> {
    let (qoi_state_grad, qoi_param_grad) = assemble_qoi_derivatives(sys, u, mu)?;
    Ok(GlobalEvaluation {
        residual: assemble_residual(sys, u, mu)?,
        jacobian: assemble_jacobian(sys, u, mu)?,
        qoi: assemble_qoi(sys, u, mu)?,
        qoi_state_grad,
        qoi_param_grad,
        residual_param_jac: assemble_param_jacobian(sys, u, mu)?,
    })
}
