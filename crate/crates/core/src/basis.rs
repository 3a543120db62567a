//! Reduced-basis construction: orthogonalization, snapshot compression, and
//! the per-iteration trust-region basis.
//!
//! A [`ReducedBasis`] carries the orthonormal global basis, an optional
//! affine offset, and cached per-element row gathers of both, which is what
//! the element-level reduced and hyperreduced evaluations consume.

use nalgebra::{DMatrix, DVector};

use crate::system::{ElementConnectivity, StateVec};
use crate::{Error, Result};

/// Columns whose post-projection norm falls below this fraction of their
/// original norm are treated as linearly dependent and dropped.
pub const GRAM_SCHMIDT_DROP_TOL: f64 = 1e-10;

/// Singular values below this fraction of the largest are treated as zero
/// when deciding the effective rank of a snapshot matrix.
pub const POD_RANK_TOL: f64 = 1e-12;

/// Orthonormalizes the columns of `columns` by modified Gram-Schmidt with a
/// re-orthogonalization pass, dropping numerically dependent columns.
pub fn gram_schmidt(columns: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if columns.ncols() == 0 {
        return Err(Error::Contract("gram_schmidt needs at least one column".into()));
    }
    if columns.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("gram_schmidt input must be finite".into()));
    }
    let m = columns.nrows();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for j in 0..columns.ncols() {
        let mut v = DVector::from_column_slice(columns.column(j).as_slice());
        let original_norm = v.norm();
        if original_norm == 0.0 {
            continue;
        }
        // Two passes of projection removal keep orthogonality near machine
        // precision even for ill-conditioned inputs.
        for _ in 0..2 {
            for q in &kept {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm < GRAM_SCHMIDT_DROP_TOL * original_norm {
            continue;
        }
        kept.push(v / norm);
    }
    let n = kept.len();
    let mut phi = DMatrix::zeros(m, n);
    for (j, q) in kept.iter().enumerate() {
        phi.set_column(j, q);
    }
    Ok(phi)
}

/// Leading left singular vectors of `snapshots`, at most `k` of them and at
/// most the numerical rank. Requires `k <= min(rows, cols)`.
pub fn pod_compress(snapshots: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (m, c) = (snapshots.nrows(), snapshots.ncols());
    if k > m.min(c) {
        return Err(Error::Contract(format!(
            "POD rank {k} exceeds min(rows, cols) = {}",
            m.min(c)
        )));
    }
    if k == 0 {
        return Ok(DMatrix::zeros(m, 0));
    }
    let svd = snapshots.clone().svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let sigma = &svd.singular_values;
    // Defensive ordering: descending singular value, earlier index first on
    // ties.
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap().then(a.cmp(&b)));
    let sigma_max = sigma[order[0]];
    let effective = order
        .iter()
        .take(k)
        .take_while(|&&i| sigma[i] > POD_RANK_TOL * sigma_max)
        .count();
    let mut out = DMatrix::zeros(m, effective);
    for (j, &i) in order.iter().take(effective).enumerate() {
        out.set_column(j, &u.column(i));
    }
    Ok(out)
}

/// Primal and adjoint snapshot collections, plus the optional sensitivity
/// snapshots at the starting point.
#[derive(Debug, Clone, Default)]
pub struct SnapshotStore {
    primal: Vec<StateVec>,
    adjoint: Vec<StateVec>,
    initial_sensitivities: Option<DMatrix<f64>>,
}

impl SnapshotStore {
    /// Empty store.
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one primal/adjoint snapshot pair.
    pub fn push_pair(&mut self, u_star: StateVec, lambda_star: StateVec) {
        assert!(u_star.iter().all(|x| x.is_finite()), "non-finite primal snapshot");
        assert!(lambda_star.iter().all(|x| x.is_finite()), "non-finite adjoint snapshot");
        self.primal.push(u_star);
        self.adjoint.push(lambda_star);
    }

    /// Stores the sensitivity snapshots (columns of `∂u*/∂mu` at the start).
    pub fn set_initial_sensitivities(&mut self, sens: DMatrix<f64>) {
        self.initial_sensitivities = Some(sens);
    }

    /// Sensitivity snapshots, when present.
    pub fn initial_sensitivities(&self) -> Option<&DMatrix<f64>> {
        self.initial_sensitivities.as_ref()
    }

    /// Number of stored snapshot pairs.
    pub fn len(&self) -> usize {
        self.primal.len()
    }

    /// True when no pairs are stored.
    pub fn is_empty(&self) -> bool {
        self.primal.is_empty()
    }

    /// Most recent primal snapshot.
    pub fn latest_primal(&self) -> Option<&StateVec> {
        self.primal.last()
    }

    fn primal_matrix(&self, subtract: Option<&StateVec>) -> DMatrix<f64> {
        let rows = self.primal.first().map_or(0, |v| v.len());
        let mut m = DMatrix::zeros(rows, self.primal.len());
        for (j, v) in self.primal.iter().enumerate() {
            match subtract {
                Some(off) => m.set_column(j, &(v - off)),
                None => m.set_column(j, v),
            }
        }
        m
    }

    fn adjoint_matrix(&self) -> DMatrix<f64> {
        let rows = self.adjoint.first().map_or(0, |v| v.len());
        let mut m = DMatrix::zeros(rows, self.adjoint.len());
        for (j, v) in self.adjoint.iter().enumerate() {
            m.set_column(j, v);
        }
        m
    }
}

/// Per-element row gathers of the basis and offset.
#[derive(Debug, Clone)]
pub struct ElementRestriction {
    /// Rows of the basis at the element's own dofs.
    pub phi_own: DMatrix<f64>,
    /// Rows of the basis at the element's neighbor dofs.
    pub phi_neighbor: DMatrix<f64>,
    /// Offset values at own dofs (zeros when no offset).
    pub offset_own: DVector<f64>,
    /// Offset values at neighbor dofs (zeros when no offset).
    pub offset_neighbor: DVector<f64>,
}

/// Orthonormal reduced basis with optional affine offset and cached element
/// restrictions.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    phi: DMatrix<f64>,
    offset: Option<StateVec>,
    restrictions: Vec<ElementRestriction>,
}

impl ReducedBasis {
    /// Builds the basis from an orthonormal `phi`, caching the per-element
    /// row gathers.
    pub fn new(
        phi: DMatrix<f64>,
        offset: Option<StateVec>,
        conn: &ElementConnectivity,
    ) -> Result<Self> {
        if phi.nrows() != conn.num_dofs() {
            return Err(Error::Contract(format!(
                "basis has {} rows, system has {} dofs",
                phi.nrows(),
                conn.num_dofs()
            )));
        }
        if let Some(off) = &offset {
            if off.len() != phi.nrows() {
                return Err(Error::Contract("offset length mismatch".into()));
            }
        }
        let n = phi.ncols();
        let gram_err = (phi.transpose() * &phi - DMatrix::identity(n, n)).amax();
        if n > 0 && gram_err > 1e-12 {
            return Err(Error::Contract(format!(
                "basis columns are not orthonormal (max deviation {gram_err:.3e})"
            )));
        }
        let zero = DVector::zeros(phi.nrows());
        let off_ref = offset.as_ref().unwrap_or(&zero);
        let restrictions = (0..conn.num_elements())
            .map(|e| {
                let own = conn.own_dofs(e);
                let nbr = conn.neighbor_dofs(e);
                ElementRestriction {
                    phi_own: DMatrix::from_fn(own.len(), n, |i, j| phi[(own[i], j)]),
                    phi_neighbor: DMatrix::from_fn(nbr.len(), n, |i, j| phi[(nbr[i], j)]),
                    offset_own: DVector::from_iterator(own.len(), own.iter().map(|&d| off_ref[d])),
                    offset_neighbor: DVector::from_iterator(
                        nbr.len(),
                        nbr.iter().map(|&d| off_ref[d]),
                    ),
                }
            })
            .collect();
        Ok(Self { phi, offset, restrictions })
    }

    /// Reduced dimension `n`.
    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// Full-order dimension `N_u`.
    pub fn num_dofs(&self) -> usize {
        self.phi.nrows()
    }

    /// The basis matrix.
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Affine offset, when present.
    pub fn offset(&self) -> Option<&StateVec> {
        self.offset.as_ref()
    }

    /// Cached restriction of element `e`.
    pub fn restriction(&self, e: usize) -> &ElementRestriction {
        &self.restrictions[e]
    }

    /// Lifts reduced coordinates to the full space: `u = offset + phi y`.
    pub fn lift(&self, y: &DVector<f64>) -> StateVec {
        let mut u = &self.phi * y;
        if let Some(off) = &self.offset {
            u += off;
        }
        u
    }

    /// Least-squares reduced coordinates of `u`: `phi' (u - offset)`.
    pub fn project(&self, u: &StateVec) -> DVector<f64> {
        match &self.offset {
            Some(off) => self.phi.transpose() * (u - off),
            None => self.phi.transpose() * u,
        }
    }

    /// Relative reprojection error `||phi phi' w - w|| / ||w||` of a vector
    /// (offset ignored); zero for vectors in the range of the basis.
    pub fn reprojection_error(&self, w: &StateVec) -> f64 {
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let projected = &self.phi * (self.phi.transpose() * w);
        (projected - w).norm() / norm
    }
}

/// Builds the trust-region basis from the current primal/adjoint pair and
/// the snapshot history: orthonormalizes `[u*, lambda*, initial
/// sensitivities?, POD_p(primal snapshots), POD_q(adjoint snapshots)]`.
///
/// With `affine` set, the offset is `u*`, `u*` itself is excluded from the
/// column list, and primal snapshots enter as deviations from the offset.
#[allow(clippy::too_many_arguments)]
pub fn build_tr_basis(
    store: &SnapshotStore,
    u_star: &StateVec,
    lambda_star: &StateVec,
    p_k: usize,
    q_k: usize,
    include_init_sens: bool,
    affine: bool,
    conn: &ElementConnectivity,
) -> Result<ReducedBasis> {
    if p_k > store.len() || q_k > store.len() {
        return Err(Error::Contract(format!(
            "POD ranks ({p_k}, {q_k}) exceed the {} stored snapshot pairs",
            store.len()
        )));
    }
    let n_u = u_star.len();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    if !affine {
        cols.push(u_star.clone());
    }
    cols.push(lambda_star.clone());
    if include_init_sens {
        if let Some(sens) = store.initial_sensitivities() {
            for j in 0..sens.ncols() {
                cols.push(DVector::from_column_slice(sens.column(j).as_slice()));
            }
        }
    }
    if p_k > 0 && !store.is_empty() {
        let snaps = store.primal_matrix(affine.then_some(u_star));
        let pod = pod_compress(&snaps, p_k.min(snaps.nrows()))?;
        for j in 0..pod.ncols() {
            cols.push(DVector::from_column_slice(pod.column(j).as_slice()));
        }
    }
    if q_k > 0 && !store.is_empty() {
        let snaps = store.adjoint_matrix();
        let pod = pod_compress(&snaps, q_k.min(snaps.nrows()))?;
        for j in 0..pod.ncols() {
            cols.push(DVector::from_column_slice(pod.column(j).as_slice()));
        }
    }
    let mut stacked = DMatrix::zeros(n_u, cols.len());
    for (j, c) in cols.iter().enumerate() {
        stacked.set_column(j, c);
    }
    let phi = gram_schmidt(&stacked)?;
    let basis = ReducedBasis::new(phi, affine.then(|| u_star.clone()), conn)?;

    // Membership of the current pair is what the downstream error bounds
    // rely on; fail loudly if orthogonalization lost it.
    if !affine && basis.reprojection_error(u_star) > 1e-10 {
        return Err(Error::LinearAlgebra(
            "primal solution left the reduced basis range".into(),
        ));
    }
    if basis.reprojection_error(lambda_star) > 1e-10 {
        return Err(Error::LinearAlgebra(
            "adjoint solution left the reduced basis range".into(),
        ));
    }
    Ok(basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn simple_conn(n: usize) -> ElementConnectivity {
        let own = (0..n).map(|e| vec![e]).collect();
        let nbr = vec![Vec::new(); n];
        ElementConnectivity::new(n, own, nbr, vec![1.0 / n as f64; n], 1.0).unwrap()
    }

    #[test]
    fn identity_input_is_reproduced() {
        let phi = gram_schmidt(&DMatrix::identity(4, 4)).unwrap();
        assert_relative_eq!(phi, DMatrix::identity(4, 4), epsilon = 1e-14);
    }

    #[test]
    fn parallel_vectors_collapse_to_one() {
        let mut m = DMatrix::zeros(5, 2);
        m.set_column(0, &DVector::from_fn(5, |i, _| (i + 1) as f64));
        m.set_column(1, &DVector::from_fn(5, |i, _| 2.0 * (i + 1) as f64));
        let phi = gram_schmidt(&m).unwrap();
        assert_eq!(phi.ncols(), 1);
    }

    #[test]
    fn rank_deficient_matrix_keeps_rank_many_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // 50x6 matrix of rank 4.
        let left = DMatrix::from_fn(50, 4, |_, _| rng.random_range(-1.0..1.0));
        let right = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let m = &left * &right;
        // SVD rank oracle.
        let svd_rank = m
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10)
            .count();
        assert_eq!(svd_rank, 4);
        let phi = gram_schmidt(&m).unwrap();
        assert_eq!(phi.ncols(), 4);
        // Column-space vectors are reproduced by the projector.
        let x = &left * DVector::from_fn(4, |i, _| (i as f64 + 0.5).sin());
        let reproj = &phi * (phi.transpose() * &x);
        assert!((reproj - &x).norm() <= 1e-10 * x.norm());
    }

    #[test]
    fn orthonormality_holds_after_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let m = DMatrix::from_fn(30, 8, |_, _| rng.random_range(-1.0..1.0));
        let phi = gram_schmidt(&m).unwrap();
        let gram = phi.transpose() * &phi;
        assert!((gram - DMatrix::identity(8, 8)).amax() <= 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            gram_schmidt(&DMatrix::zeros(5, 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pod_of_single_snapshot_is_the_normalized_snapshot() {
        let v = DVector::from_vec(vec![3.0, 0.0, 4.0]);
        let m = DMatrix::from_columns(&[v.clone()]);
        let pod = pod_compress(&m, 1).unwrap();
        let q = DVector::from_column_slice(pod.column(0).as_slice());
        let aligned = if q.dot(&v) < 0.0 { -q } else { q };
        assert_relative_eq!(aligned, v / 5.0, epsilon = 1e-14);
    }

    #[test]
    fn pod_of_orthonormal_input_spans_the_same_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let m = gram_schmidt(&DMatrix::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap();
        let pod = pod_compress(&m, 3).unwrap();
        assert_eq!(pod.ncols(), 3);
        // Same span: projecting each original column loses nothing.
        for j in 0..3 {
            let c = DVector::from_column_slice(m.column(j).as_slice());
            let reproj = &pod * (pod.transpose() * &c);
            assert!((reproj - &c).norm() <= 1e-12);
        }
    }

    #[test]
    fn pod_rank_one_pair_gives_shared_direction() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let m = DMatrix::from_columns(&[v.clone() * 2.0, v.clone() * -3.0]);
        let pod = pod_compress(&m, 1).unwrap();
        assert_eq!(pod.ncols(), 1);
        let q = DVector::from_column_slice(pod.column(0).as_slice());
        let cos = q.dot(&v).abs() / v.norm();
        assert_relative_eq!(cos, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pod_truncates_to_effective_rank() {
        let v = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let m = DMatrix::from_columns(&[v.clone(), v.clone()]);
        let pod = pod_compress(&m, 2).unwrap();
        assert_eq!(pod.ncols(), 1, "rank-1 input yields one mode");
        assert!(matches!(pod_compress(&m, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn first_iteration_basis_is_the_pair_only() {
        let store = SnapshotStore::new();
        let u = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        let l = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        let conn = simple_conn(4);
        let basis = build_tr_basis(&store, &u, &l, 0, 0, false, false, &conn).unwrap();
        assert_eq!(basis.dim(), 2);
        assert!(basis.reprojection_error(&u) <= 1e-10);
        assert!(basis.reprojection_error(&l) <= 1e-10);
    }

    #[test]
    fn basis_size_grows_as_twenty_plus_two_k() {
        // 18 sensitivity snapshots plus the pair, then two snapshots per
        // iteration with no truncation.
        let n_u = 120;
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let randv =
            |rng: &mut ChaCha8Rng| DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        let conn = simple_conn(n_u);
        let mut store = SnapshotStore::new();
        store.set_initial_sensitivities(DMatrix::from_fn(n_u, 18, |_, _| {
            rng.random_range(-1.0..1.0)
        }));
        for k in 0..4 {
            let u = randv(&mut rng);
            let l = randv(&mut rng);
            let basis =
                build_tr_basis(&store, &u, &l, k, k, true, false, &conn).unwrap();
            assert_eq!(basis.dim(), 20 + 2 * k);
            store.push_pair(u, l);
        }
    }

    #[test]
    fn affine_mode_stores_offset_and_deviations() {
        let n_u = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let conn = simple_conn(n_u);
        let mut store = SnapshotStore::new();
        let old_u = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        let old_l = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        store.push_pair(old_u.clone(), old_l);
        let u = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        let l = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        let basis = build_tr_basis(&store, &u, &l, 1, 1, false, true, &conn).unwrap();
        assert_eq!(basis.offset().unwrap(), &u);
        // lambda*, one primal deviation, one adjoint snapshot.
        assert_eq!(basis.dim(), 3);
        // The deviation direction (old_u - u) is representable.
        let dev = &old_u - &u;
        assert!(basis.reprojection_error(&dev) <= 1e-10);
    }

    #[test]
    fn element_restrictions_are_row_gathers() {
        let conn = ElementConnectivity::new(
            4,
            vec![vec![1, 3], vec![0, 2]],
            vec![vec![2], vec![]],
            vec![0.5, 0.5],
            1.0,
        )
        .unwrap();
        let phi = gram_schmidt(&DMatrix::from_fn(4, 2, |i, j| {
            ((i * 2 + j) as f64 * 0.64).sin()
        }))
        .unwrap();
        let basis = ReducedBasis::new(phi.clone(), None, &conn).unwrap();
        let r = basis.restriction(0);
        for j in 0..2 {
            assert_eq!(r.phi_own[(0, j)], phi[(1, j)]);
            assert_eq!(r.phi_own[(1, j)], phi[(3, j)]);
            assert_eq!(r.phi_neighbor[(0, j)], phi[(2, j)]);
        }
    }
}
