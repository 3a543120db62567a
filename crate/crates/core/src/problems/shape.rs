//! Shape benchmark: nonlinear diffusion on a deforming triangulated square.
//!
//! The top edge of the unit square is displaced by parametrized sine bumps;
//! the motion extends into the mesh through the reduced linear-elasticity
//! operator from [`crate::meshmotion`], so every element's coordinates are a
//! precomputed linear map of the parameters. The state solves
//! `-div((1 + u^2) grad u) = s` with homogeneous Dirichlet boundary on the
//! deformed mesh (piecewise-linear elements, centroid quadrature). The
//! objective tracks per-element mean state values recorded at a target
//! shape inside an observation window, plus a Tikhonov term on the
//! parameters.
//!
//! All parameter derivatives chain through the mesh motion analytically.

use nalgebra::{DMatrix, DVector};

use crate::meshmotion::{
    train_motion_basis, LinearBoundaryMap, MeshPartition, TriMesh,
};
use crate::newton::{solve_primal, NewtonConfig};
use crate::system::{
    ElementConnectivity, ParamVec, ParameterBounds, StateVec, UnassembledSystem,
};
use crate::Result;

/// Vertical bump amplitude per unit parameter.
const BUMP_SCALE: f64 = 0.15;
/// Constant volumetric source.
const SOURCE: f64 = 8.0;
/// Parameter box half-width.
const PARAM_BOUND: f64 = 0.4;
/// Observation window (reference centroids inside it are tracked).
const TRACK_X: (f64, f64) = (0.2, 0.8);
const TRACK_Y: (f64, f64) = (0.45, 1.0);

#[derive(Debug, Clone)]
struct ShapeElem {
    /// Global dof of each local node (`None` for boundary nodes).
    dof_of_local: [Option<usize>; 3],
    /// Reference coordinates `(x1, y1, x2, y2, x3, y3)`.
    q_ref: [f64; 6],
    /// Coordinate sensitivity `∂q/∂mu` through the reduced mesh motion.
    b_mu: DMatrix<f64>,
    /// Observation weight (1 inside the window).
    w_track: f64,
    /// Tracked mean state value at the target shape.
    target_mean: f64,
    /// Reference area fraction carrying the regularization term.
    vol_frac: f64,
}

/// Geometry of one element at given local coordinates.
struct ElemGeo {
    b: [f64; 3],
    c: [f64; 3],
    d: f64,
}

fn geometry(q: &[f64; 6]) -> ElemGeo {
    let (x1, y1, x2, y2, x3, y3) = (q[0], q[1], q[2], q[3], q[4], q[5]);
    ElemGeo {
        b: [y2 - y3, y3 - y1, y1 - y2],
        c: [x3 - x2, x1 - x3, x2 - x1],
        d: x1 * (y2 - y3) + x2 * (y3 - y1) + x3 * (y1 - y2),
    }
}

/// `∂D/∂q` in local coordinate order.
fn d_doubled_area(g: &ElemGeo) -> [f64; 6] {
    [g.b[0], g.c[0], g.b[1], g.c[1], g.b[2], g.c[2]]
}

// `∂b_i/∂q_k` and `∂c_i/∂q_k` sparsity tables: (i, k, value).
const DB: [(usize, usize, f64); 6] = [
    (0, 3, 1.0),
    (0, 5, -1.0),
    (1, 5, 1.0),
    (1, 1, -1.0),
    (2, 1, 1.0),
    (2, 3, -1.0),
];
const DC: [(usize, usize, f64); 6] = [
    (0, 4, 1.0),
    (0, 2, -1.0),
    (1, 0, 1.0),
    (1, 4, -1.0),
    (2, 2, 1.0),
    (2, 0, -1.0),
];

/// Nonlinear diffusion on a parametrically deformed triangulation.
#[derive(Debug, Clone)]
pub struct ShapeDiffusionProblem {
    n_dofs: usize,
    n_mu: usize,
    alpha: f64,
    conn: ElementConnectivity,
    elems: Vec<ShapeElem>,
    bounds: ParameterBounds,
}

impl ShapeDiffusionProblem {
    /// Parameter box used by the optimization drivers.
    pub fn bounds(&self) -> &ParameterBounds {
        &self.bounds
    }

    /// Regularization weight.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn local_coords(&self, e: usize, mu: &ParamVec) -> [f64; 6] {
        let elem = &self.elems[e];
        let disp = &elem.b_mu * mu;
        let mut q = elem.q_ref;
        for k in 0..6 {
            q[k] += disp[k];
        }
        q
    }

    /// Local nodal state values: own dofs in order, zeros at boundary nodes.
    fn local_state(&self, e: usize, own: &DVector<f64>) -> [f64; 3] {
        let elem = &self.elems[e];
        let mut u = [0.0; 3];
        let mut next = 0;
        for (l, d) in elem.dof_of_local.iter().enumerate() {
            if d.is_some() {
                u[l] = own[next];
                next += 1;
            }
        }
        u
    }

    /// Weak-form residual rows for all three local nodes.
    fn raw_rows(&self, u: &[f64; 3], g: &ElemGeo) -> [f64; 3] {
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let kappa = 1.0 + mean * mean;
        let p: f64 = (0..3).map(|j| u[j] * g.b[j]).sum();
        let q: f64 = (0..3).map(|j| u[j] * g.c[j]).sum();
        let mut rows = [0.0; 3];
        for i in 0..3 {
            rows[i] = kappa / (2.0 * g.d) * (p * g.b[i] + q * g.c[i]) - SOURCE * g.d / 6.0;
        }
        rows
    }

    /// Doubled signed areas of all elements at the deformed coordinates;
    /// positive values mean a valid (non-inverted) mesh.
    pub fn deformed_doubled_areas(&self, mu: &ParamVec) -> Vec<f64> {
        (0..self.elems.len())
            .map(|e| geometry(&self.local_coords(e, mu)).d)
            .collect()
    }

    /// Elements inside the observation window.
    pub fn tracked_elements(&self) -> Vec<usize> {
        (0..self.elems.len())
            .filter(|&e| self.elems[e].w_track > 0.0)
            .collect()
    }

    fn with_targets(mut self, means: Vec<f64>) -> Self {
        assert_eq!(means.len(), self.elems.len());
        for (elem, m) in self.elems.iter_mut().zip(means) {
            elem.target_mean = m;
        }
        self
    }

    /// Per-element mean state values at `(u, mu)`.
    fn element_means(&self, u: &StateVec) -> Vec<f64> {
        (0..self.elems.len())
            .map(|e| {
                let own = self.conn.gather_own(e, u);
                let locals = self.local_state(e, &own);
                (locals[0] + locals[1] + locals[2]) / 3.0
            })
            .collect()
    }
}

impl UnassembledSystem for ShapeDiffusionProblem {
    fn num_dofs(&self) -> usize {
        self.n_dofs
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
        let u = self.local_state(e, own);
        let g = geometry(&self.local_coords(e, mu));
        let rows = self.raw_rows(&u, &g);
        let elem = &self.elems[e];
        DVector::from_iterator(
            own.len(),
            (0..3).filter(|&l| elem.dof_of_local[l].is_some()).map(|l| rows[l]),
        )
    }

    fn element_qoi(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> f64 {
        let elem = &self.elems[e];
        let u = self.local_state(e, own);
        let g = geometry(&self.local_coords(e, mu));
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let diff = mean - elem.target_mean;
        0.5 * elem.w_track * diff * diff * (g.d / 2.0)
            + 0.5 * self.alpha * mu.norm_squared() * elem.vol_frac
    }

    fn element_residual_state_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        _neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let elem = &self.elems[e];
        let u = self.local_state(e, own);
        let g = geometry(&self.local_coords(e, mu));
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let kappa = 1.0 + mean * mean;
        let p: f64 = (0..3).map(|j| u[j] * g.b[j]).sum();
        let q: f64 = (0..3).map(|j| u[j] * g.c[j]).sum();
        let mut full = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let dkappa = 2.0 * mean / 3.0;
                full[i][j] = dkappa / (2.0 * g.d) * (p * g.b[i] + q * g.c[i])
                    + kappa / (2.0 * g.d) * (g.b[j] * g.b[i] + g.c[j] * g.c[i]);
            }
        }
        let dofs: Vec<usize> =
            (0..3).filter(|&l| elem.dof_of_local[l].is_some()).collect();
        let jac = DMatrix::from_fn(dofs.len(), dofs.len(), |i, j| full[dofs[i]][dofs[j]]);
        (jac, DMatrix::zeros(dofs.len(), 0))
    }

    fn element_residual_param_jac(
        &self,
        e: usize,
        own: &DVector<f64>,
        _neighbor: &DVector<f64>,
        mu: &ParamVec,
    ) -> DMatrix<f64> {
        let elem = &self.elems[e];
        let u = self.local_state(e, own);
        let g = geometry(&self.local_coords(e, mu));
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let kappa = 1.0 + mean * mean;
        let p: f64 = (0..3).map(|j| u[j] * g.b[j]).sum();
        let q: f64 = (0..3).map(|j| u[j] * g.c[j]).sum();
        let dd = d_doubled_area(&g);
        // dr_i/dq_k for all rows and the six local coordinates.
        let mut dr_dq = [[0.0; 6]; 3];
        for k in 0..6 {
            let mut dp = 0.0;
            let mut dq = 0.0;
            let mut db_i = [0.0; 3];
            let mut dc_i = [0.0; 3];
            for &(i, kk, v) in DB.iter() {
                if kk == k {
                    db_i[i] = v;
                    dp += u[i] * v;
                }
            }
            for &(i, kk, v) in DC.iter() {
                if kk == k {
                    dc_i[i] = v;
                    dq += u[i] * v;
                }
            }
            for i in 0..3 {
                let num = p * g.b[i] + q * g.c[i];
                let dnum = dp * g.b[i] + p * db_i[i] + dq * g.c[i] + q * dc_i[i];
                dr_dq[i][k] = kappa / 2.0 * (dnum / g.d - num * dd[k] / (g.d * g.d))
                    - SOURCE * dd[k] / 6.0;
            }
        }
        let dofs: Vec<usize> =
            (0..3).filter(|&l| elem.dof_of_local[l].is_some()).collect();
        // Chain rule through the mesh motion: dr/dmu = (dr/dq) (dq/dmu).
        DMatrix::from_fn(dofs.len(), self.n_mu, |i, m| {
            (0..6).map(|k| dr_dq[dofs[i]][k] * elem.b_mu[(k, m)]).sum()
        })
    }

    fn element_qoi_state_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        let elem = &self.elems[e];
        let u = self.local_state(e, own);
        let g = geometry(&self.local_coords(e, mu));
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let diff = mean - elem.target_mean;
        let grad_all = elem.w_track * diff * (g.d / 2.0) / 3.0;
        DVector::from_iterator(
            own.len(),
            (0..3)
                .filter(|&l| elem.dof_of_local[l].is_some())
                .map(|_| grad_all),
        )
    }

    fn element_qoi_param_grad(&self, e: usize, own: &DVector<f64>, mu: &ParamVec) -> DVector<f64> {
        let elem = &self.elems[e];
        let u = self.local_state(e, own);
        let g = geometry(&self.local_coords(e, mu));
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let diff = mean - elem.target_mean;
        let dd = d_doubled_area(&g);
        DVector::from_fn(self.n_mu, |m, _| {
            let da: f64 = (0..6).map(|k| dd[k] * elem.b_mu[(k, m)]).sum::<f64>() / 2.0;
            0.5 * elem.w_track * diff * diff * da + self.alpha * mu[m] * elem.vol_frac
        })
    }
}

/// Deterministic target parameters for `n_mu` bumps.
pub fn shape_target_mu(n_mu: usize) -> ParamVec {
    let pattern = [0.35, -0.3, 0.25, -0.2, 0.3, -0.25];
    DVector::from_fn(n_mu, |i, _| pattern[i % pattern.len()])
}

/// Builds the shape benchmark on an `nx x ny` structured square mesh.
///
/// The tracking target is generated by solving the system at
/// [`shape_target_mu`], so the observation misfit vanishes there. Returns
/// the system, the starting point (the origin), and the mesh-motion
/// partition.
pub fn make_shape_diffusion(
    mesh_spec: (usize, usize),
    n_mu: usize,
    alpha: f64,
) -> Result<(ShapeDiffusionProblem, ParamVec, MeshPartition)> {
    let (nx, ny) = mesh_spec;
    let mesh = TriMesh::unit_square(nx, ny);
    let n_nodes = mesh.num_nodes();
    let boundary = mesh.boundary_nodes();

    // Vertical sine bumps on the interior of the top edge.
    let mut jac = DMatrix::zeros(2 * boundary.len(), n_mu);
    for (i, &n) in boundary.iter().enumerate() {
        let [x, y] = mesh.coords[n];
        if y >= 1.0 - 1e-12 && x > 1e-12 && x < 1.0 - 1e-12 {
            for j in 0..n_mu {
                jac[(2 * i + 1, j)] =
                    BUMP_SCALE * ((j + 1) as f64 * std::f64::consts::PI * x).sin();
            }
        }
    }
    let part = MeshPartition::new(
        mesh.clone(),
        boundary.clone(),
        Box::new(LinearBoundaryMap::new(jac.clone())),
    )?;
    let motion = train_motion_basis(&part, &DVector::zeros(n_mu), 1.0, 2 * n_mu)?;

    // Interior nodes carry the diffusion dofs.
    let mut is_boundary = vec![false; n_nodes];
    for &n in &boundary {
        is_boundary[n] = true;
    }
    let mut dof_of_node = vec![None; n_nodes];
    let mut n_dofs = 0;
    for n in 0..n_nodes {
        if !is_boundary[n] {
            dof_of_node[n] = Some(n_dofs);
            n_dofs += 1;
        }
    }

    let ne = mesh.triangles.len();
    let mut own_dofs = Vec::with_capacity(ne);
    let mut elems = Vec::with_capacity(ne);
    let mut volumes = Vec::with_capacity(ne);
    let mut total_area = 0.0;
    for t in 0..ne {
        let nodes = mesh.triangles[t];
        let area = mesh.doubled_area(t, &mesh.coords) / 2.0;
        total_area += area;
        volumes.push(area);
        let dof_of_local = [
            dof_of_node[nodes[0]],
            dof_of_node[nodes[1]],
            dof_of_node[nodes[2]],
        ];
        own_dofs.push(dof_of_local.iter().flatten().copied().collect::<Vec<_>>());
        let mut q_ref = [0.0; 6];
        for l in 0..3 {
            q_ref[2 * l] = mesh.coords[nodes[l]][0];
            q_ref[2 * l + 1] = mesh.coords[nodes[l]][1];
        }
        let cx = (q_ref[0] + q_ref[2] + q_ref[4]) / 3.0;
        let cy = (q_ref[1] + q_ref[3] + q_ref[5]) / 3.0;
        let w_track = if cx >= TRACK_X.0 && cx <= TRACK_X.1 && cy >= TRACK_Y.0 && cy <= TRACK_Y.1 {
            1.0
        } else {
            0.0
        };
        let b_mu = motion.element_op(t) * &jac;
        elems.push(ShapeElem {
            dof_of_local,
            q_ref,
            b_mu,
            w_track,
            target_mean: 0.0,
            vol_frac: 0.0,
        });
    }
    for (elem, v) in elems.iter_mut().zip(volumes.iter()) {
        elem.vol_frac = v / total_area;
    }
    let conn = ElementConnectivity::new(
        n_dofs,
        own_dofs,
        vec![Vec::new(); ne],
        volumes,
        total_area,
    )?;
    let bounds = ParameterBounds::new(
        DVector::from_element(n_mu, -PARAM_BOUND),
        DVector::from_element(n_mu, PARAM_BOUND),
    )?;
    let bare = ShapeDiffusionProblem {
        n_dofs,
        n_mu,
        alpha,
        conn,
        elems,
        bounds,
    };

    // Self-generated target: solve at the target shape and record the
    // per-element mean state.
    let mu_t = shape_target_mu(n_mu);
    let cfg = NewtonConfig { max_iters: 80, ..Default::default() };
    let sol = solve_primal(&bare, &mu_t, &DVector::zeros(n_dofs), &cfg)?;
    let means = bare.element_means(&sol.u);
    let problem = bare.with_targets(means);
    Ok((problem, DVector::zeros(n_mu), part))
}
