//! Smallest generalized eigenpairs of `(A_h, M_h)`, optionally restricted to
//! the subspace `{x : C^T x = 0}`.
//!
//! Small problems are solved densely (with an explicit QR null-space basis for
//! the constrained case). Larger ones use shift-invert subspace iteration with
//! a sparse Cholesky factor of `A_h - shift M_h`; constraints are enforced by a
//! Schur-complement correction of every inner solve.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::system::DiscreteSystem;
use crate::error::{Error, Result};
use crate::sparse::{self, SpdSolver};

/// Problems with at most this many free unknowns are solved densely.
const DENSE_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    #[default]
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone)]
pub struct EigenOptions {
    pub method: EigenMethod,
    pub shift: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            method: EigenMethod::Auto,
            shift: 0.0,
            tolerance: 1e-10,
            max_iterations: 1000,
        }
    }
}

/// Eigenvalues in ascending order with `M`-orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

/// Dense symmetric-definite eigenproblem `a v = theta m v`, ascending.
pub fn dense_generalized(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<Eigenpairs> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::LinearSolve("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::LinearSolve("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let w = DMatrix::from_fn(c.nrows(), order.len(), |r, col| eig.eigenvectors[(r, order[col])]);
    let vectors = l
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or_else(|| Error::LinearSolve("singular Cholesky factor".into()))?;
    Ok(Eigenpairs { values, vectors })
}

fn dense(a: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, row) in a.row_iter().enumerate() {
        for (&j, v) in row.col_indices().iter().zip(row.values()) {
            d[(i, j)] = *v;
        }
    }
    d
}

fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
}

fn spmm(a: &CsrMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), x.ncols());
    for (c, col) in x.column_iter().enumerate() {
        let y = sparse::matvec(a, &col.into_owned());
        out.set_column(c, &y);
    }
    out
}

/// The `k` smallest eigenpairs of `(a, m)` on `{x : constraints^T x = 0}`.
pub fn smallest(
    a: &CsrMatrix<f64>,
    m: &CsrMatrix<f64>,
    k: usize,
    constraints: Option<&DMatrix<f64>>,
    opts: &EigenOptions,
) -> Result<Eigenpairs> {
    let n = a.nrows();
    let ncon = constraints.map_or(0, |c| c.ncols());
    if let Some(c) = constraints {
        if c.nrows() != n {
            return Err(Error::InvalidInput("constraint rows must equal node count".into()));
        }
    }
    if ncon >= n {
        return Err(Error::RankDeficient);
    }
    let free = n - ncon;
    if k == 0 || k > free {
        return Err(Error::InvalidInput(format!(
            "requested {k} eigenpairs from a space of dimension {free}"
        )));
    }
    let use_dense = match opts.method {
        EigenMethod::Dense => true,
        EigenMethod::Iterative => false,
        EigenMethod::Auto => free <= DENSE_LIMIT,
    };
    let mut pairs = if use_dense {
        smallest_dense(a, m, k, constraints)?
    } else {
        smallest_iterative(a, m, k, constraints, opts)?
    };
    fix_signs(&mut pairs.vectors);
    Ok(pairs)
}

/// The `k` smallest eigenpairs of `(A_h, M_h)` for an assembled system.
pub fn eigenpairs(sys: &DiscreteSystem, k: usize) -> Result<Eigenpairs> {
    smallest(sys.stiffness(), sys.mass(), k, None, &EigenOptions::default())
}

fn smallest_dense(
    a: &CsrMatrix<f64>,
    m: &CsrMatrix<f64>,
    k: usize,
    constraints: Option<&DMatrix<f64>>,
) -> Result<Eigenpairs> {
    let (ad, md) = (dense(a), dense(m));
    let Some(c) = constraints.filter(|c| c.ncols() > 0) else {
        let all = dense_generalized(&ad, &md)?;
        return Ok(Eigenpairs {
            values: all.values.rows(0, k).into_owned(),
            vectors: all.vectors.columns(0, k).into_owned(),
        });
    };
    let n = c.nrows();
    let ncon = c.ncols();
    // Null space of C^T from a full QR of C.
    let qr = c.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax().max(1e-300);
    if (0..ncon).any(|i| r[(i, i)].abs() <= 1e-12 * scale) {
        return Err(Error::RankDeficient);
    }
    let mut q_full = DMatrix::identity(n, n);
    qr.q_tr_mul(&mut q_full);
    let q_full = q_full.transpose();
    let z = q_full.columns(ncon, n - ncon).into_owned();
    let az = z.transpose() * &ad * &z;
    let mz = z.transpose() * &md * &z;
    let reduced = dense_generalized(&az, &mz)?;
    Ok(Eigenpairs {
        values: reduced.values.rows(0, k).into_owned(),
        vectors: &z * reduced.vectors.columns(0, k),
    })
}

/// Solves `(A - shift M) x = r` restricted to the constraint subspace.
struct ConstrainedInverse<'a> {
    solver: SpdSolver,
    constraints: Option<&'a DMatrix<f64>>,
    solved_constraints: DMatrix<f64>,
    schur: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl<'a> ConstrainedInverse<'a> {
    fn new(op: &CsrMatrix<f64>, constraints: Option<&'a DMatrix<f64>>) -> Result<Self> {
        let solver = SpdSolver::new(op)?;
        let (solved_constraints, schur) = match constraints.filter(|c| c.ncols() > 0) {
            None => (DMatrix::zeros(0, 0), None),
            Some(c) => {
                let mut w = DMatrix::zeros(c.nrows(), c.ncols());
                for j in 0..c.ncols() {
                    w.set_column(j, &solver.solve(&c.column(j).into_owned()));
                }
                let s = c.transpose() * &w;
                let s = (&s + s.transpose()) * 0.5;
                let chol = s.cholesky().ok_or(Error::RankDeficient)?;
                (w, Some(chol))
            }
        };
        Ok(Self {
            solver,
            constraints,
            solved_constraints,
            schur,
        })
    }

    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solver.solve(r);
        if let (Some(c), Some(schur)) = (self.constraints, &self.schur) {
            let mu = schur.solve(&(c.transpose() * &x));
            x -= &self.solved_constraints * mu;
        }
        x
    }
}

fn smallest_iterative(
    a: &CsrMatrix<f64>,
    m: &CsrMatrix<f64>,
    k: usize,
    constraints: Option<&DMatrix<f64>>,
    opts: &EigenOptions,
) -> Result<Eigenpairs> {
    let n = a.nrows();
    let ncon = constraints.map_or(0, |c| c.ncols());
    let p = (2 * k).max(k + 8).min(n - ncon);
    let shifted = sparse::combine(&[(1.0, a), (-opts.shift, m)]);
    let inverse = ConstrainedInverse::new(&shifted, constraints)?;
    let residual_projector = match constraints.filter(|c| c.ncols() > 0) {
        Some(c) => Some((c, (c.transpose() * c).cholesky().ok_or(Error::RankDeficient)?)),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
    let mut worst = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let mx = spmm(m, &x);
        let mut y = DMatrix::zeros(n, p);
        for j in 0..p {
            y.set_column(j, &inverse.apply(&mx.column(j).into_owned()));
        }
        let q = y.qr().q();
        let ar = q.transpose() * spmm(a, &q);
        let mr = q.transpose() * spmm(m, &q);
        let ritz = dense_generalized(&((&ar + ar.transpose()) * 0.5), &((&mr + mr.transpose()) * 0.5))?;
        x = &q * &ritz.vectors;

        worst = 0.0;
        for i in 0..k {
            let xi = x.column(i).into_owned();
            let mxi = sparse::matvec(m, &xi);
            let mut r = sparse::matvec(a, &xi) - &mxi * ritz.values[i];
            if let Some((c, cc)) = &residual_projector {
                let mu = cc.solve(&(c.transpose() * &r));
                r -= *c * mu;
            }
            let rel = r.norm() / (ritz.values[i].abs().max(1e-300) * mxi.norm());
            worst = worst.max(rel);
        }
        if worst <= opts.tolerance {
            return Ok(Eigenpairs {
                values: ritz.values.rows(0, k).into_owned(),
                vectors: x.columns(0, k).into_owned(),
            });
        }
    }
    Err(Error::EigenNoConvergence {
        iterations: opts.max_iterations,
        residual: worst,
    })
}
