//! Sparse storage and the dense factorization shared by the solvers.
//!
//! Global Jacobians are stored in compressed sparse row form with a pattern
//! built once from the element connectivity; only the values are refreshed
//! between evaluations. Systems at the scale this crate targets are solved
//! by a dense LU with partial pivoting that exposes both plain and
//! transposed solves, so one factorization serves the sensitivity (plain)
//! and adjoint (transposed) systems.

use nalgebra::{DMatrix, DVector};

use crate::system::ElementConnectivity;
use crate::{Error, Result};

/// Square sparse matrix in CSR form with a frozen sparsity pattern.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds the pattern as the union of element dof cliques: for element
    /// `e`, rows `own_dofs[e]` couple to columns `own_dofs[e] ∪
    /// neighbor_dofs[e]`. Column indices within a row are sorted.
    pub fn pattern_from_connectivity(conn: &ElementConnectivity) -> Self {
        let n = conn.num_dofs();
        let mut cols_per_row: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in 0..conn.num_elements() {
            let own = conn.own_dofs(e);
            let nbr = conn.neighbor_dofs(e);
            for &row in own {
                let cols = &mut cols_per_row[row];
                cols.extend_from_slice(own);
                cols.extend_from_slice(nbr);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for cols in &mut cols_per_row {
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend_from_slice(cols);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Resets all stored values to zero, keeping the pattern.
    pub fn zero_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `v` to entry `(i, j)`, which must be part of the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k] += v,
            Err(_) => panic!("entry ({i}, {j}) outside the CSR pattern"),
        }
    }

    /// Stored value at `(i, j)`, or zero when outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    /// True when `(i, j)` is part of the stored pattern.
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi].binary_search(&j).is_ok()
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n, "matvec dimension mismatch");
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    /// Dense copy, used for factorization.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                dense[(i, self.col_idx[k])] = self.values[k];
            }
        }
        dense
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
///
/// Unlike the factorizations in nalgebra, this one solves both `A x = b` and
/// `Aᵀ x = b` from the same factors.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    // L (unit lower, implicit diagonal) and U packed in one matrix.
    lu: DMatrix<f64>,
    // perm[i] = original row index now in position i.
    perm: Vec<usize>,
}

impl LuFactors {
    /// Factorizes a dense square matrix. Fails when a pivot column is
    /// numerically zero.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Contract(format!(
                "LU requires a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let mut lu = a;
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut max = lu[(k, k)].abs();
            for i in (k + 1)..n {
                let v = lu[(i, k)].abs();
                if v > max {
                    max = v;
                    p = i;
                }
            }
            if !(max > 0.0) || !max.is_finite() {
                return Err(Error::LinearAlgebra(format!(
                    "singular matrix (pivot {k} has magnitude {max:.3e})"
                )));
            }
            if p != k {
                lu.swap_rows(p, k);
                perm.swap(p, k);
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let m = lu[(i, k)] / pivot;
                lu[(i, k)] = m;
                for j in (k + 1)..n {
                    let ukj = lu[(k, j)];
                    lu[(i, j)] -= m * ukj;
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    /// Factorizes a CSR matrix by densifying it first.
    pub fn from_csr(a: &CsrMatrix) -> Result<Self> {
        Self::new(a.to_dense())
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n, "solve dimension mismatch");
        // Apply P, forward substitute with L, back substitute with U.
        let mut x = DVector::from_fn(self.n, |i, _| b[self.perm[i]]);
        for i in 0..self.n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..self.n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..self.n {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc / self.lu[(i, i)];
        }
        x
    }

    /// Solves `Aᵀ x = b` using the same factors: `Aᵀ = Uᵀ Lᵀ P`, so forward
    /// substitute with `Uᵀ`, back substitute with `Lᵀ`, then undo `P`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n, "solve_transpose dimension mismatch");
        let mut y = b.clone();
        for i in 0..self.n {
            let mut acc = y[i];
            for j in 0..i {
                acc -= self.lu[(j, i)] * y[j];
            }
            y[i] = acc / self.lu[(i, i)];
        }
        for i in (0..self.n).rev() {
            let mut acc = y[i];
            for j in (i + 1)..self.n {
                acc -= self.lu[(j, i)] * y[j];
            }
            y[i] = acc;
        }
        let mut x = DVector::zeros(self.n);
        for i in 0..self.n {
            x[self.perm[i]] = y[i];
        }
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n, b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve(&DVector::from_column_slice(b.column(j).as_slice()));
            x.set_column(j, &col);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::ElementConnectivity;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn chain_connectivity(num_elems: usize) -> ElementConnectivity {
        // 1D chain: element e couples dofs e and e+1.
        let own = (0..num_elems).map(|e| vec![e, e + 1]).collect();
        let nbr = vec![Vec::new(); num_elems];
        let vols = vec![1.0 / num_elems as f64; num_elems];
        ElementConnectivity::new(num_elems + 1, own, nbr, vols, 1.0).unwrap()
    }

    #[test]
    fn pattern_is_tridiagonal_for_a_chain() {
        let conn = chain_connectivity(4);
        let m = CsrMatrix::pattern_from_connectivity(&conn);
        assert_eq!(m.dim(), 5);
        for i in 0..5 {
            for j in 0..5 {
                let expected = (i as isize - j as isize).abs() <= 1;
                assert_eq!(m.contains(i, j), expected, "({i},{j})");
            }
        }
    }

    #[test]
    fn add_and_matvec_round_trip() {
        let conn = chain_connectivity(3);
        let mut m = CsrMatrix::pattern_from_connectivity(&conn);
        // Assemble the standard second-difference matrix.
        for e in 0..3 {
            m.add(e, e, 1.0);
            m.add(e, e + 1, -1.0);
            m.add(e + 1, e, -1.0);
            m.add(e + 1, e + 1, 1.0);
        }
        let x = DVector::from_fn(4, |i, _| i as f64);
        let y = m.matvec(&x);
        let dense = m.to_dense();
        assert_relative_eq!(y, &dense * &x, epsilon = 1e-15);
    }

    #[test]
    #[should_panic(expected = "outside the CSR pattern")]
    fn add_outside_pattern_panics() {
        let conn = chain_connectivity(3);
        let mut m = CsrMatrix::pattern_from_connectivity(&conn);
        m.add(0, 3, 1.0);
    }

    #[test]
    fn lu_matches_nalgebra_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 2 + trial % 9;
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
                + DMatrix::identity(n, n) * 3.0;
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let ours = LuFactors::new(a.clone()).unwrap().solve(&b);
            let theirs = a.lu().solve(&b).unwrap();
            assert_relative_eq!(ours, theirs, epsilon = 1e-11);
        }
    }

    #[test]
    fn transpose_solve_matches_factoring_the_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = 6;
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
                + DMatrix::identity(n, n) * 2.5;
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let via_same_factors = LuFactors::new(a.clone()).unwrap().solve_transpose(&b);
            let via_transposed = LuFactors::new(a.transpose()).unwrap().solve(&b);
            assert_relative_eq!(via_same_factors, via_transposed, epsilon = 1e-11);
            assert_relative_eq!(a.transpose() * &via_same_factors, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            LuFactors::new(a),
            Err(crate::Error::LinearAlgebra(_))
        ));
    }
}
