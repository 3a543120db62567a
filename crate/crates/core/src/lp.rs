//! Deterministic linear-program solver for `min c'x` subject to `G x <= h`,
//! `x >= 0`.
//!
//! Two-phase revised simplex with Bland's anti-cycling rule and a dense
//! basis inverse that is rebuilt from scratch every
//! [`LpOptions::refactor_interval`] pivots. Sized for the weight-training
//! programs: up to a few thousand variables and hundreds of rows.

use nalgebra::{DMatrix, DVector};

use crate::linalg::LuFactors;
use crate::{Error, Result};

/// `min c'x` subject to `G x <= h`, `x >= 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    /// Objective coefficients, length `n_vars`.
    pub c: DVector<f64>,
    /// Inequality matrix, `n_cons x n_vars`.
    pub g: DMatrix<f64>,
    /// Inequality right-hand side, length `n_cons`.
    pub h: DVector<f64>,
}

impl LinearProgram {
    /// Validates dimensions and finiteness.
    pub fn new(c: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        if g.ncols() != c.len() || g.nrows() != h.len() {
            return Err(Error::Contract(format!(
                "LP dimensions disagree: c has {}, G is {}x{}, h has {}",
                c.len(),
                g.nrows(),
                g.ncols(),
                h.len()
            )));
        }
        if c.iter().chain(g.iter()).chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract("LP data must be finite".into()));
        }
        Ok(Self { c, g, h })
    }

    /// Number of decision variables.
    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    /// Number of inequality constraints.
    pub fn n_cons(&self) -> usize {
        self.h.len()
    }
}

/// Solver tolerances and limits.
#[derive(Debug, Clone)]
pub struct LpOptions {
    /// Dual feasibility tolerance on reduced costs.
    pub opt_tol: f64,
    /// Primal feasibility tolerance.
    pub feas_tol: f64,
    /// Pivot limit; zero means `50 (n_vars + n_cons)`.
    pub max_pivots: usize,
    /// Pivots between basis-inverse rebuilds.
    pub refactor_interval: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            opt_tol: 1e-9,
            feas_tol: 1e-9,
            max_pivots: 0,
            refactor_interval: 50,
        }
    }
}

/// Termination status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    /// Optimal vertex found; the certificate holds to the tolerances.
    Optimal,
    /// The feasible set is empty.
    Infeasible,
    /// Pivot limit reached or numerical breakdown (including unbounded
    /// rays); `x` carries the best iterate.
    IterationLimit,
}

/// Solver output.
#[derive(Debug, Clone)]
pub struct LpSolution {
    /// Primal point (decision variables only).
    pub x: DVector<f64>,
    /// Objective value at `x`.
    pub objective: f64,
    /// Termination status.
    pub status: LpStatus,
    /// Pivots performed across both phases.
    pub pivots: usize,
}

struct Tableau {
    /// Full column matrix: decision variables, then slacks, then
    /// artificials.
    a: DMatrix<f64>,
    /// Current objective over all columns.
    cost: DVector<f64>,
    /// Right-hand side (nonnegative after row flips).
    rhs: DVector<f64>,
    /// Basic column per row.
    basis: Vec<usize>,
    /// Dense basis inverse.
    binv: DMatrix<f64>,
    /// Basic variable values.
    xb: DVector<f64>,
    /// Columns barred from entering (artificials in phase 2).
    barred: Vec<bool>,
    pivots: usize,
    since_refactor: usize,
}

enum StepOutcome {
    Optimal,
    Pivoted,
    Unbounded,
}

impl Tableau {
    fn refactor(&mut self) -> Result<()> {
        let m = self.basis.len();
        let mut b = DMatrix::zeros(m, m);
        for (k, &j) in self.basis.iter().enumerate() {
            b.set_column(k, &self.a.column(j));
        }
        let lu = LuFactors::new(b)?;
        let mut binv = DMatrix::zeros(m, m);
        for k in 0..m {
            let mut e = DVector::zeros(m);
            e[k] = 1.0;
            binv.set_column(k, &lu.solve(&e));
        }
        self.binv = binv;
        self.xb = &self.binv * &self.rhs;
        self.since_refactor = 0;
        Ok(())
    }

    /// One Bland step: scan columns in index order, enter the first with a
    /// negative reduced cost, leave by smallest ratio then smallest variable
    /// index.
    fn step(&mut self, opt_tol: f64) -> Result<StepOutcome> {
        let m = self.basis.len();
        // y = B^{-T} c_B.
        let cb = DVector::from_fn(m, |k, _| self.cost[self.basis[k]]);
        let y = self.binv.transpose() * cb;

        let mut entering = None;
        for j in 0..self.a.ncols() {
            if self.barred[j] || self.basis.contains(&j) {
                continue;
            }
            let reduced = self.cost[j] - y.dot(&self.a.column(j).into_owned());
            if reduced < -opt_tol {
                entering = Some(j);
                break;
            }
        }
        let Some(entering) = entering else {
            return Ok(StepOutcome::Optimal);
        };

        let w = &self.binv * self.a.column(entering).into_owned();
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if w[i] > 1e-12 {
                let ratio = self.xb[i] / w[i];
                let better = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - 1e-12
                            || (ratio < lr + 1e-12 && self.basis[i] < self.basis[li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((row, t)) = leave else {
            return Ok(StepOutcome::Unbounded);
        };

        // Product-form update of the basis inverse.
        let pivot = w[row];
        let mut e = DMatrix::identity(m, m);
        for i in 0..m {
            e[(i, row)] = if i == row { 1.0 / pivot } else { -w[i] / pivot };
        }
        self.binv = &e * &self.binv;
        self.xb -= &w * t;
        self.xb[row] = t;
        self.basis[row] = entering;
        self.pivots += 1;
        self.since_refactor += 1;
        Ok(StepOutcome::Pivoted)
    }

    fn run_phase(&mut self, opts: &LpOptions, max_pivots: usize) -> Result<StepOutcome> {
        loop {
            if self.pivots >= max_pivots {
                return Ok(StepOutcome::Unbounded); // treated as breakdown by caller
            }
            if self.since_refactor >= opts.refactor_interval {
                self.refactor()?;
            }
            match self.step(opts.opt_tol)? {
                StepOutcome::Pivoted => continue,
                other => return Ok(other),
            }
        }
    }

    fn objective(&self) -> f64 {
        self.basis
            .iter()
            .zip(self.xb.iter())
            .map(|(&j, &v)| self.cost[j] * v)
            .sum()
    }

    fn extract(&self, n_vars: usize) -> DVector<f64> {
        let mut x = DVector::zeros(n_vars);
        for (k, &j) in self.basis.iter().enumerate() {
            if j < n_vars {
                x[j] = self.xb[k];
            }
        }
        x
    }
}

/// Solves the linear program. Deterministic: identical inputs take identical
/// pivots.
pub fn solve_lp(lp: &LinearProgram, opts: &LpOptions) -> Result<LpSolution> {
    if opts.opt_tol <= 0.0 || opts.feas_tol <= 0.0 {
        return Err(Error::Contract("LP tolerances must be positive".into()));
    }
    let n = lp.n_vars();
    let m = lp.n_cons();
    let max_pivots = if opts.max_pivots == 0 { 50 * (n + m) } else { opts.max_pivots };

    if m == 0 {
        // Only the nonnegativity cone: the origin is optimal iff no
        // objective coefficient is negative.
        if lp.c.iter().all(|&cj| cj >= -opts.opt_tol) {
            return Ok(LpSolution {
                x: DVector::zeros(n),
                objective: 0.0,
                status: LpStatus::Optimal,
                pivots: 0,
            });
        }
        return Ok(LpSolution {
            x: DVector::zeros(n),
            objective: 0.0,
            status: LpStatus::IterationLimit,
            pivots: 0,
        });
    }

    // Standard form G x + s = h with flipped rows getting artificials.
    let flipped: Vec<bool> = (0..m).map(|i| lp.h[i] < 0.0).collect();
    let n_art = flipped.iter().filter(|f| **f).count();
    let total = n + m + n_art;
    let mut a = DMatrix::zeros(m, total);
    let mut rhs = DVector::zeros(m);
    let mut art_col = n + m;
    let mut basis = Vec::with_capacity(m);
    for i in 0..m {
        let sign = if flipped[i] { -1.0 } else { 1.0 };
        for j in 0..n {
            a[(i, j)] = sign * lp.g[(i, j)];
        }
        a[(i, n + i)] = sign;
        rhs[i] = sign * lp.h[i];
        if flipped[i] {
            a[(i, art_col)] = 1.0;
            basis.push(art_col);
            art_col += 1;
        } else {
            basis.push(n + i);
        }
    }

    let mut tab = Tableau {
        a,
        cost: DVector::zeros(total),
        rhs,
        basis,
        binv: DMatrix::identity(m, m),
        xb: DVector::zeros(m),
        barred: vec![false; total],
        pivots: 0,
        since_refactor: 0,
    };
    tab.refactor()?;

    // Phase 1: drive the artificials to zero.
    if n_art > 0 {
        for j in (n + m)..total {
            tab.cost[j] = 1.0;
        }
        match tab.run_phase(opts, max_pivots)? {
            StepOutcome::Optimal => {}
            _ => {
                return Ok(LpSolution {
                    x: tab.extract(n),
                    objective: f64::NAN,
                    status: LpStatus::IterationLimit,
                    pivots: tab.pivots,
                });
            }
        }
        if tab.objective() > opts.feas_tol * (1.0 + lp.h.amax()) {
            return Ok(LpSolution {
                x: DVector::zeros(n),
                objective: f64::NAN,
                status: LpStatus::Infeasible,
                pivots: tab.pivots,
            });
        }
        // Pivot remaining (degenerate) artificials out of the basis; rows
        // where that is impossible are redundant and harmless since the
        // artificial stays barred at zero.
        for row in 0..m {
            if tab.basis[row] >= n + m {
                let brow = tab.binv.row(row).transpose();
                let replacement = (0..n + m).find(|&j| {
                    !tab.basis.contains(&j)
                        && brow.dot(&tab.a.column(j).into_owned()).abs() > 1e-9
                });
                if let Some(j) = replacement {
                    tab.basis[row] = j;
                    tab.refactor()?;
                }
            }
        }
        for j in (n + m)..total {
            tab.barred[j] = true;
        }
    }

    // Phase 2: the true objective.
    tab.cost = DVector::zeros(total);
    for j in 0..n {
        tab.cost[j] = lp.c[j];
    }
    let status = match tab.run_phase(opts, max_pivots)? {
        StepOutcome::Optimal => LpStatus::Optimal,
        _ => LpStatus::IterationLimit,
    };
    let x = tab.extract(n);
    let objective = lp.c.dot(&x);

    if status == LpStatus::Optimal {
        debug_assert!(
            certificate_holds(lp, &x, opts),
            "optimal return failed the feasibility certificate"
        );
    }
    Ok(LpSolution { x, objective, status, pivots: tab.pivots })
}

/// Independent primal feasibility check: `G x <= h + feas_tol` rowwise and
/// `x >= -feas_tol`.
pub fn certificate_holds(lp: &LinearProgram, x: &DVector<f64>, opts: &LpOptions) -> bool {
    let scale = 1.0 + lp.h.amax();
    let gx = &lp.g * x;
    let primal_ok = (0..lp.n_cons()).all(|i| gx[i] <= lp.h[i] + opts.feas_tol * scale)
        && x.iter().all(|&v| v >= -opts.feas_tol);
    primal_ok
}
