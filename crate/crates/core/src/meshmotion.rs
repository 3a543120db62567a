//! Physics-based mesh motion by constrained linear elasticity, and its
//! projection-based reduction.
//!
//! Mesh node displacements are split into driven dofs (boundary nodes whose
//! motion is prescribed, possibly as zero) and constrained dofs (everything
//! else, determined by a linear elasticity solve treating the mesh as a
//! pseudo-structure). The reduced variant projects the constrained dofs
//! onto a small basis trained from coordinate perturbations of each shape
//! parameter, after which each element's coordinates come from one small
//! matrix-vector product.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::basis::pod_compress;
use crate::system::ParamVec;
use crate::{Error, Result};

/// Plane-stress Poisson ratio of the pseudo-structure.
const POISSON: f64 = 0.3;

/// Triangulated 2D mesh.
#[derive(Debug, Clone)]
pub struct TriMesh {
    /// Node coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Triangles as node index triples, counterclockwise.
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Structured triangulation of the unit square with `nx x ny` cells,
    /// each split along the southwest-to-northeast diagonal.
    pub fn unit_square(nx: usize, ny: usize) -> Self {
        assert!(nx >= 2 && ny >= 2);
        let node = |i: usize, j: usize| j * (nx + 1) + i;
        let mut coords = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                coords.push([i as f64 / nx as f64, j as f64 / ny as f64]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (a, b, c, d) = (node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1));
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        Self { coords, triangles }
    }

    /// Number of nodes.
    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Nodes on the boundary of the unit square (exact coordinate match).
    pub fn boundary_nodes(&self) -> Vec<usize> {
        self.coords
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c[0] <= 1e-12 || c[0] >= 1.0 - 1e-12 || c[1] <= 1e-12 || c[1] >= 1.0 - 1e-12
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Signed doubled area of triangle `t` at the given node coordinates.
    pub fn doubled_area(&self, t: usize, coords: &[[f64; 2]]) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (coords[a], coords[b], coords[c]);
        (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])
    }
}

/// Map from shape parameters to displacements of the driven dofs.
pub trait BoundaryMap: Sync + Send {
    /// Parameter dimension.
    fn num_params(&self) -> usize;
    /// Displacements of the driven dofs at `mu`, length `N_x^o`.
    fn displacements(&self, mu: &ParamVec) -> DVector<f64>;
    /// Jacobian of [`BoundaryMap::displacements`], `N_x^o x N_mu`.
    fn jacobian(&self, mu: &ParamVec) -> DMatrix<f64>;
}

/// Linear boundary map `x_o = J mu`.
#[derive(Debug, Clone)]
pub struct LinearBoundaryMap {
    jac: DMatrix<f64>,
}

impl LinearBoundaryMap {
    /// Wraps a constant Jacobian.
    pub fn new(jac: DMatrix<f64>) -> Self {
        Self { jac }
    }
}

impl BoundaryMap for LinearBoundaryMap {
    fn num_params(&self) -> usize {
        self.jac.ncols()
    }
    fn displacements(&self, mu: &ParamVec) -> DVector<f64> {
        &self.jac * mu
    }
    fn jacobian(&self, _mu: &ParamVec) -> DMatrix<f64> {
        self.jac.clone()
    }
}

/// Partitioned elasticity operator for mesh motion.
///
/// Displacement dofs are ordered `(x, y)` per node; driven dofs follow the
/// order of `driven_nodes`, constrained dofs the order of the remaining
/// nodes.
pub struct MeshPartition {
    mesh: TriMesh,
    driven_nodes: Vec<usize>,
    constrained_nodes: Vec<usize>,
    /// Dof index within its class, per node: `(is_driven, index)`.
    node_slot: Vec<(bool, usize)>,
    k_cc: DMatrix<f64>,
    k_co: DMatrix<f64>,
    k_cc_chol: Cholesky<f64, Dyn>,
    boundary_map: Box<dyn BoundaryMap>,
}

impl MeshPartition {
    /// Assembles the elasticity operator on `mesh` (unit Young's modulus,
    /// Poisson ratio 0.3, plane stress) and partitions it: `driven_nodes`
    /// carry prescribed displacements, all other nodes are constrained dofs
    /// solved for by elasticity.
    pub fn new(
        mesh: TriMesh,
        driven_nodes: Vec<usize>,
        boundary_map: Box<dyn BoundaryMap>,
    ) -> Result<Self> {
        let n_nodes = mesh.num_nodes();
        let mut is_driven = vec![false; n_nodes];
        for &n in &driven_nodes {
            if n >= n_nodes {
                return Err(Error::Contract(format!("driven node {n} out of range")));
            }
            if is_driven[n] {
                return Err(Error::Contract(format!("driven node {n} listed twice")));
            }
            is_driven[n] = true;
        }
        let constrained_nodes: Vec<usize> = (0..n_nodes).filter(|&n| !is_driven[n]).collect();
        if constrained_nodes.is_empty() {
            return Err(Error::Contract("no constrained nodes left".into()));
        }
        let mut node_slot = vec![(false, 0usize); n_nodes];
        for (i, &n) in driven_nodes.iter().enumerate() {
            node_slot[n] = (true, i);
        }
        for (i, &n) in constrained_nodes.iter().enumerate() {
            node_slot[n] = (false, i);
        }

        let n_c = 2 * constrained_nodes.len();
        let n_o = 2 * driven_nodes.len();
        let mut k_cc = DMatrix::zeros(n_c, n_c);
        let mut k_co = DMatrix::zeros(n_c, n_o);
        for t in 0..mesh.triangles.len() {
            let ke = element_stiffness(&mesh, t)?;
            let nodes = mesh.triangles[t];
            for (li, &ni) in nodes.iter().enumerate() {
                let (di, si) = node_slot[ni];
                if di {
                    continue;
                }
                for (lj, &nj) in nodes.iter().enumerate() {
                    let (dj, sj) = node_slot[nj];
                    for a in 0..2 {
                        for b in 0..2 {
                            let v = ke[(2 * li + a, 2 * lj + b)];
                            if dj {
                                k_co[(2 * si + a, 2 * sj + b)] += v;
                            } else {
                                k_cc[(2 * si + a, 2 * sj + b)] += v;
                            }
                        }
                    }
                }
            }
        }
        let k_cc_chol = Cholesky::new(k_cc.clone()).ok_or_else(|| {
            Error::LinearAlgebra("constrained elasticity block is not positive definite".into())
        })?;
        Ok(Self {
            mesh,
            driven_nodes,
            constrained_nodes,
            node_slot,
            k_cc,
            k_co,
            k_cc_chol,
            boundary_map,
        })
    }

    /// The underlying mesh.
    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    /// Driven node indices.
    pub fn driven_nodes(&self) -> &[usize] {
        &self.driven_nodes
    }

    /// Number of driven displacement dofs `N_x^o`.
    pub fn num_driven_dofs(&self) -> usize {
        2 * self.driven_nodes.len()
    }

    /// Number of constrained displacement dofs `N_x^c`.
    pub fn num_constrained_dofs(&self) -> usize {
        2 * self.constrained_nodes.len()
    }

    /// The boundary displacement map.
    pub fn boundary_map(&self) -> &dyn BoundaryMap {
        self.boundary_map.as_ref()
    }

    /// Constrained stiffness block.
    pub fn k_cc(&self) -> &DMatrix<f64> {
        &self.k_cc
    }

    /// Coupling stiffness block.
    pub fn k_co(&self) -> &DMatrix<f64> {
        &self.k_co
    }

    /// Solves `K_cc x_c = -K_co x_o` for given driven displacements.
    pub fn solve_constrained(&self, x_o: &DVector<f64>) -> DVector<f64> {
        self.k_cc_chol.solve(&(-(&self.k_co * x_o)))
    }

    /// Assembles the full per-node displacement vector (2 dofs per node)
    /// from class vectors.
    pub fn scatter_displacement(&self, x_o: &DVector<f64>, x_c: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(2 * self.mesh.num_nodes());
        for (i, &n) in self.driven_nodes.iter().enumerate() {
            full[2 * n] = x_o[2 * i];
            full[2 * n + 1] = x_o[2 * i + 1];
        }
        for (i, &n) in self.constrained_nodes.iter().enumerate() {
            full[2 * n] = x_c[2 * i];
            full[2 * n + 1] = x_c[2 * i + 1];
        }
        full
    }

    /// Rows of the element coordinate gather: for triangle `t`, returns the
    /// per-dof class memberships `(is_driven, slot)` in local order
    /// `(x1, y1, x2, y2, x3, y3)`.
    fn element_slots(&self, t: usize) -> [(bool, usize); 6] {
        let nodes = self.mesh.triangles[t];
        let mut out = [(false, 0usize); 6];
        for (l, &n) in nodes.iter().enumerate() {
            let (driven, slot) = self.node_slot[n];
            out[2 * l] = (driven, 2 * slot);
            out[2 * l + 1] = (driven, 2 * slot + 1);
        }
        out
    }
}

/// Plane-stress constant-strain-triangle stiffness, unit Young's modulus.
fn element_stiffness(mesh: &TriMesh, t: usize) -> Result<DMatrix<f64>> {
    let d2 = mesh.doubled_area(t, &mesh.coords);
    if d2 <= 0.0 {
        return Err(Error::Contract(format!(
            "triangle {t} is inverted or degenerate in the reference mesh"
        )));
    }
    let [a, b, c] = mesh.triangles[t];
    let (pa, pb, pc) = (mesh.coords[a], mesh.coords[b], mesh.coords[c]);
    let bv = [pb[1] - pc[1], pc[1] - pa[1], pa[1] - pb[1]];
    let cv = [pc[0] - pb[0], pa[0] - pc[0], pb[0] - pa[0]];
    // Strain-displacement matrix (3x6), factor 1/d2.
    let mut bm = DMatrix::zeros(3, 6);
    for i in 0..3 {
        bm[(0, 2 * i)] = bv[i];
        bm[(1, 2 * i + 1)] = cv[i];
        bm[(2, 2 * i)] = cv[i];
        bm[(2, 2 * i + 1)] = bv[i];
    }
    bm /= d2;
    let e = 1.0;
    let f = e / (1.0 - POISSON * POISSON);
    let dmat = DMatrix::from_row_slice(
        3,
        3,
        &[
            f,
            f * POISSON,
            0.0,
            f * POISSON,
            f,
            0.0,
            0.0,
            0.0,
            f * (1.0 - POISSON) / 2.0,
        ],
    );
    let area = d2 / 2.0;
    Ok(bm.transpose() * dmat * bm * area)
}

/// Full-order mesh motion: the per-node displacement field at `mu`.
pub fn full_motion(part: &MeshPartition, mu: &ParamVec) -> Result<DVector<f64>> {
    if mu.len() != part.boundary_map.num_params() {
        return Err(Error::Contract("parameter dimension mismatch".into()));
    }
    let x_o = part.boundary_map.displacements(mu);
    let x_c = part.solve_constrained(&x_o);
    Ok(part.scatter_displacement(&x_o, &x_c))
}

/// Reduced mesh-motion operator: basis for the constrained dofs, projected
/// stiffness blocks, and the cached per-element operators.
pub struct MotionBasis {
    psi: DMatrix<f64>,
    /// `K̂_cc^{-1} K̂_co`, the reduced solve folded into one matrix.
    reduced_solve: DMatrix<f64>,
    /// Per-element operators mapping driven displacements to element
    /// coordinate displacements (6 x N_x^o each).
    element_ops: Vec<DMatrix<f64>>,
}

impl MotionBasis {
    /// Builds the reduced operator from an explicit constrained-dof basis.
    pub fn from_psi(part: &MeshPartition, psi: DMatrix<f64>) -> Result<Self> {
        if psi.nrows() != part.num_constrained_dofs() {
            return Err(Error::Contract(format!(
                "basis has {} rows, partition has {} constrained dofs",
                psi.nrows(),
                part.num_constrained_dofs()
            )));
        }
        let khat_cc = psi.transpose() * &part.k_cc * &psi;
        let khat_co = psi.transpose() * &part.k_co;
        let chol = Cholesky::new(khat_cc).ok_or_else(|| {
            Error::LinearAlgebra("reduced elasticity block is not positive definite".into())
        })?;
        let reduced_solve = chol.solve(&khat_co);
        // psi_c K̂cc^{-1} K̂co evaluated rowwise per element dof.
        let element_ops = (0..part.mesh.triangles.len())
            .map(|t| {
                let slots = part.element_slots(t);
                let n_o = part.num_driven_dofs();
                let mut op = DMatrix::zeros(6, n_o);
                for (row, &(driven, slot)) in slots.iter().enumerate() {
                    if driven {
                        op[(row, slot)] = 1.0;
                    } else {
                        // -psi_row * reduced_solve
                        let psi_row = psi.row(slot);
                        for col in 0..n_o {
                            let mut acc = 0.0;
                            for r in 0..psi.ncols() {
                                acc += psi_row[r] * reduced_solve[(r, col)];
                            }
                            op[(row, col)] = -acc;
                        }
                    }
                }
                op
            })
            .collect();
        Ok(Self { psi, reduced_solve, element_ops })
    }

    /// Basis dimension `r`.
    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    /// The constrained-dof basis.
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// Reduced coordinates of the constrained dofs at driven displacements
    /// `x_o`.
    pub fn reduced_coordinates(&self, x_o: &DVector<f64>) -> DVector<f64> {
        -(&self.reduced_solve * x_o)
    }

    /// Per-element operator for element `e`.
    pub fn element_op(&self, e: usize) -> &DMatrix<f64> {
        &self.element_ops[e]
    }
}

/// Trains the reduced motion basis by compressing full-motion snapshots of
/// the constrained dofs at `mu0 ± epsilon e_i`, then caches the reduced
/// blocks and per-element operators.
pub fn train_motion_basis(
    part: &MeshPartition,
    mu0: &ParamVec,
    epsilon: f64,
    r: usize,
) -> Result<MotionBasis> {
    let n_mu = part.boundary_map.num_params();
    if epsilon <= 0.0 {
        return Err(Error::Contract("perturbation size must be positive".into()));
    }
    if r > 2 * n_mu {
        return Err(Error::Contract(format!(
            "requested rank {r} exceeds the {} snapshots",
            2 * n_mu
        )));
    }
    let mut snaps = DMatrix::zeros(part.num_constrained_dofs(), 2 * n_mu);
    for i in 0..n_mu {
        for (s, sign) in [(2 * i, 1.0), (2 * i + 1, -1.0)] {
            let mut mu = mu0.clone();
            mu[i] += sign * epsilon;
            let x_o = part.boundary_map.displacements(&mu);
            snaps.set_column(s, &part.solve_constrained(&x_o));
        }
    }
    let psi = pod_compress(&snaps, r.min(snaps.nrows()))?;
    MotionBasis::from_psi(part, psi)
}

/// Reduced mesh motion: element coordinate displacement blocks
/// `x̂_e = Â_e x_o(mu)` for the requested elements only.
pub fn reduced_motion(
    basis: &MotionBasis,
    part: &MeshPartition,
    mu: &ParamVec,
    elements: &[usize],
) -> Result<Vec<DVector<f64>>> {
    if mu.len() != part.boundary_map.num_params() {
        return Err(Error::Contract("parameter dimension mismatch".into()));
    }
    let n_elems = part.mesh.triangles.len();
    if let Some(&bad) = elements.iter().find(|&&e| e >= n_elems) {
        return Err(Error::Contract(format!("element {bad} out of range")));
    }
    let x_o = part.boundary_map.displacements(mu);
    Ok(elements
        .iter()
        .map(|&e| basis.element_op(e) * &x_o)
        .collect())
}

/// Gathers the element coordinate displacement block of element `e` from a
/// full per-node displacement field.
pub fn gather_element_displacement(
    part: &MeshPartition,
    full: &DVector<f64>,
    e: usize,
) -> DVector<f64> {
    let nodes = part.mesh.triangles[e];
    let mut out = DVector::zeros(6);
    for (l, &n) in nodes.iter().enumerate() {
        out[2 * l] = full[2 * n];
        out[2 * l + 1] = full[2 * n + 1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Top-edge bump map: vertical displacement of the top boundary nodes,
    /// zero on the rest of the boundary.
    fn bump_partition(nx: usize, ny: usize, n_mu: usize) -> MeshPartition {
        let mesh = TriMesh::unit_square(nx, ny);
        let driven = mesh.boundary_nodes();
        let mut jac = DMatrix::zeros(2 * driven.len(), n_mu);
        for (i, &n) in driven.iter().enumerate() {
            let [x, y] = mesh.coords[n];
            if y >= 1.0 - 1e-12 && x > 1e-12 && x < 1.0 - 1e-12 {
                for j in 0..n_mu {
                    jac[(2 * i + 1, j)] =
                        0.15 * ((j + 1) as f64 * std::f64::consts::PI * x).sin();
                }
            }
        }
        MeshPartition::new(mesh, driven, Box::new(LinearBoundaryMap::new(jac))).unwrap()
    }

    #[test]
    fn zero_boundary_displacement_freezes_the_mesh() {
        let part = bump_partition(6, 6, 3);
        let full = full_motion(&part, &DVector::zeros(3)).unwrap();
        assert_eq!(full.norm(), 0.0);
    }

    #[test]
    fn motion_satisfies_the_constrained_equation() {
        let part = bump_partition(6, 6, 3);
        let mu = DVector::from_vec(vec![0.4, -0.2, 0.3]);
        let x_o = part.boundary_map().displacements(&mu);
        let x_c = part.solve_constrained(&x_o);
        let res = part.k_cc() * &x_c + part.k_co() * &x_o;
        assert!(res.norm() <= 1e-10 * x_o.norm().max(1.0));
    }

    #[test]
    fn rigid_translation_is_followed_exactly() {
        // All boundary nodes driven by the same translation: the interior
        // must follow it exactly (it is the unique elasticity solution and
        // lies in the rigid-body nullspace).
        let mesh = TriMesh::unit_square(5, 5);
        let driven = mesh.boundary_nodes();
        let n_o = 2 * driven.len();
        // One parameter: uniform translation (tx, ty) = (mu, 0.5 mu).
        let mut jac = DMatrix::zeros(n_o, 1);
        for i in 0..driven.len() {
            jac[(2 * i, 0)] = 1.0;
            jac[(2 * i + 1, 0)] = 0.5;
        }
        let part =
            MeshPartition::new(mesh, driven, Box::new(LinearBoundaryMap::new(jac))).unwrap();
        let mu = DVector::from_element(1, 0.37);
        let full = full_motion(&part, &mu).unwrap();
        // Dense oracle: solve the same system with nalgebra's LU directly.
        let x_o = part.boundary_map().displacements(&mu);
        let dense = part
            .k_cc()
            .clone()
            .lu()
            .solve(&(-(part.k_co() * &x_o)))
            .unwrap();
        let ours = part.solve_constrained(&x_o);
        assert_relative_eq!(ours, dense, epsilon = 1e-9);
        for n in 0..full.len() / 2 {
            assert_relative_eq!(full[2 * n], 0.37, epsilon = 1e-9);
            assert_relative_eq!(full[2 * n + 1], 0.185, epsilon = 1e-9);
        }
    }

    #[test]
    fn full_rank_reduced_motion_equals_full_motion() {
        let part = bump_partition(4, 4, 2);
        let n_c = part.num_constrained_dofs();
        let basis = MotionBasis::from_psi(&part, DMatrix::identity(n_c, n_c)).unwrap();
        let mu = DVector::from_vec(vec![0.8, -0.5]);
        let full = full_motion(&part, &mu).unwrap();
        let all: Vec<usize> = (0..part.mesh().triangles.len()).collect();
        let blocks = reduced_motion(&basis, &part, &mu, &all).unwrap();
        for (e, block) in all.iter().zip(blocks.iter()) {
            let expected = gather_element_displacement(&part, &full, *e);
            assert!((block - &expected).norm() <= 1e-10 * expected.norm().max(1.0));
        }
    }

    #[test]
    fn trained_basis_reproduces_training_snapshots() {
        let part = bump_partition(6, 6, 3);
        let mu0 = DVector::zeros(3);
        let basis = train_motion_basis(&part, &mu0, 1.0, 6).unwrap();
        let all: Vec<usize> = (0..part.mesh().triangles.len()).collect();
        for i in 0..3 {
            for sign in [1.0, -1.0] {
                let mut mu = mu0.clone();
                mu[i] += sign;
                let full = full_motion(&part, &mu).unwrap();
                let blocks = reduced_motion(&basis, &part, &mu, &all).unwrap();
                for (e, block) in all.iter().zip(blocks.iter()) {
                    let expected = gather_element_displacement(&part, &full, *e);
                    assert!(
                        (block - &expected).norm() <= 1e-8 * expected.norm().max(1.0),
                        "training snapshot not reproduced at element {e}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_parameter_basis_spans_the_perturbation_direction() {
        let part = bump_partition(4, 4, 1);
        let basis = train_motion_basis(&part, &DVector::zeros(1), 1.0, 1).unwrap();
        assert_eq!(basis.dim(), 1);
        // The one snapshot direction is reproduced.
        let x_o = part
            .boundary_map()
            .displacements(&DVector::from_element(1, 1.0));
        let x_c = part.solve_constrained(&x_o);
        let projected = basis.psi() * (basis.psi().transpose() * &x_c);
        assert!((projected - &x_c).norm() <= 1e-10 * x_c.norm());
    }

    #[test]
    fn galerkin_optimality_of_reduced_solution() {
        let part = bump_partition(6, 6, 3);
        let basis = train_motion_basis(&part, &DVector::zeros(3), 1.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for _ in 0..5 {
            let mu = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let x_o = part.boundary_map().displacements(&mu);
            let w = basis.reduced_coordinates(&x_o);
            let residual = part.k_cc() * (basis.psi() * &w) + part.k_co() * &x_o;
            let projected = basis.psi().transpose() * residual;
            assert!(
                projected.norm() <= 1e-10 * x_o.norm().max(1.0),
                "reduced normal equations violated"
            );
        }
    }

    #[test]
    fn empty_element_list_gives_empty_output() {
        let part = bump_partition(4, 4, 2);
        let basis = train_motion_basis(&part, &DVector::zeros(2), 1.0, 4).unwrap();
        let blocks = reduced_motion(&basis, &part, &DVector::zeros(2), &[]).unwrap();
        assert!(blocks.is_empty());
    }

    #[test]
    fn deformed_mesh_keeps_positive_areas_in_training_range() {
        let part = bump_partition(8, 8, 3);
        let basis = train_motion_basis(&part, &DVector::zeros(3), 1.0, 6).unwrap();
        let mesh = part.mesh().clone();
        let all: Vec<usize> = (0..mesh.triangles.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        for _ in 0..10 {
            let mu = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let blocks = reduced_motion(&basis, &part, &mu, &all).unwrap();
            for (e, block) in all.iter().zip(blocks.iter()) {
                let [a, b, c] = mesh.triangles[*e];
                let mut coords = [mesh.coords[a], mesh.coords[b], mesh.coords[c]];
                for l in 0..3 {
                    coords[l][0] += block[2 * l];
                    coords[l][1] += block[2 * l + 1];
                }
                let d2 = (coords[1][0] - coords[0][0]) * (coords[2][1] - coords[0][1])
                    - (coords[2][0] - coords[0][0]) * (coords[1][1] - coords[0][1]);
                assert!(d2 > 0.0, "element {e} inverted at mu = {mu:?}");
            }
        }
    }
}
