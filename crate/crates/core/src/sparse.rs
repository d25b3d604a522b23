//! Small helpers around `nalgebra-sparse` for matrices that share one P1 pattern.

use std::io::Write;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::pattern::SparsityPattern;
use nalgebra_sparse::{CscMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Sparsity pattern of a P1 operator together with, for every element, the
/// positions of its local matrix entries inside the CSR value array.
#[derive(Debug, Clone)]
pub struct ElementPattern {
    pattern: SparsityPattern,
    slots: Vec<usize>,
    local: usize,
}

impl ElementPattern {
    pub fn new(n: usize, local: usize, elements: &[usize]) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for el in elements.chunks(local) {
            for &i in el {
                rows[i].extend_from_slice(el);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            cols.extend_from_slice(row);
            offsets.push(cols.len());
        }
        let pattern = SparsityPattern::try_from_offsets_and_indices(n, n, offsets, cols)
            .expect("valid P1 pattern");
        let mut slots = Vec::with_capacity(elements.len() * local);
        for el in elements.chunks(local) {
            for &i in el {
                let start = pattern.major_offsets()[i];
                let lane = pattern.lane(i);
                for &j in el {
                    let pos = lane.binary_search(&j).expect("entry in pattern");
                    slots.push(start + pos);
                }
            }
        }
        Self {
            pattern,
            slots,
            local,
        }
    }

    pub fn n(&self) -> usize {
        self.pattern.major_dim()
    }

    /// Sums local element matrices produced by `fill(e, local)` (row-major).
    pub fn assemble<F>(&self, mut fill: F) -> Result<CsrMatrix<f64>>
    where
        F: FnMut(usize, &mut [f64]) -> Result<()>,
    {
        let mut values = vec![0.0; self.pattern.nnz()];
        let block = self.local * self.local;
        let mut local = vec![0.0; block];
        for (e, slots) in self.slots.chunks(block).enumerate() {
            local.iter_mut().for_each(|v| *v = 0.0);
            fill(e, &mut local)?;
            for (s, v) in slots.iter().zip(&local) {
                values[*s] += v;
            }
        }
        Ok(CsrMatrix::try_from_pattern_and_values(self.pattern.clone(), values)
            .expect("values match pattern"))
    }
}

/// Linear combination of matrices that share one sparsity pattern.
pub fn combine(terms: &[(f64, &CsrMatrix<f64>)]) -> CsrMatrix<f64> {
    let (_, first) = terms[0];
    let mut values = vec![0.0; first.nnz()];
    for (c, m) in terms {
        debug_assert_eq!(m.pattern(), first.pattern());
        for (v, x) in values.iter_mut().zip(m.values()) {
            *v += c * x;
        }
    }
    CsrMatrix::try_from_pattern_and_values(first.pattern().clone(), values)
        .expect("shared pattern")
}

pub fn matvec(a: &CsrMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.nrows());
    matvec_into(a, x, &mut y);
    y
}

pub fn matvec_into(a: &CsrMatrix<f64>, x: &DVector<f64>, y: &mut DVector<f64>) {
    for (i, row) in a.row_iter().enumerate() {
        y[i] = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, v)| v * x[j])
            .sum();
    }
}

/// `y = A^T x`.
pub fn matvec_transpose(a: &CsrMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.ncols());
    for (i, row) in a.row_iter().enumerate() {
        let xi = x[i];
        for (&j, v) in row.col_indices().iter().zip(row.values()) {
            y[j] += v * xi;
        }
    }
    y
}

/// `x^T A y`.
pub fn bilinear(a: &CsrMatrix<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    a.row_iter()
        .enumerate()
        .map(|(i, row)| {
            x[i] * row
                .col_indices()
                .iter()
                .zip(row.values())
                .map(|(&j, v)| v * y[j])
                .sum::<f64>()
        })
        .sum()
}

/// Largest absolute entry of `A - A^T`.
pub fn asymmetry(a: &CsrMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.row_iter().enumerate() {
        for (&j, v) in row.col_indices().iter().zip(row.values()) {
            let t = a.get_entry(j, i).map(|e| e.into_value()).unwrap_or(0.0);
            worst = worst.max((v - t).abs());
        }
    }
    worst
}

/// Writes `row col value` triplets, one nonzero per line.
pub fn write_triplets<W: Write>(a: &CsrMatrix<f64>, mut out: W) -> Result<()> {
    for (i, row) in a.row_iter().enumerate() {
        for (&j, v) in row.col_indices().iter().zip(row.values()) {
            writeln!(out, "{i} {j} {v:.16e}")?;
        }
    }
    Ok(())
}

/// Sparse Cholesky factorization of a symmetric positive definite matrix.
pub struct SpdSolver {
    factor: CscCholesky<f64>,
}

impl SpdSolver {
    pub fn new(a: &CsrMatrix<f64>) -> Result<Self> {
        // A symmetric CSR matrix has the same arrays as its CSC form.
        let csc = CscMatrix::try_from_pattern_and_values(a.pattern().clone(), a.values().to_vec())
            .expect("square pattern");
        let factor = CscCholesky::factor(&csc)
            .map_err(|e| Error::LinearSolve(format!("Cholesky factorization failed: {e}")))?;
        Ok(Self { factor })
    }

    /// Refactors a matrix with the same pattern as the one this solver was built with.
    pub fn refactor(&mut self, a: &CsrMatrix<f64>) -> Result<()> {
        self.factor
            .refactor(a.values())
            .map_err(|e| Error::LinearSolve(format!("Cholesky refactorization failed: {e}")))
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.factor.solve_mut(&mut x);
        x
    }

    pub fn solve_in_place(&self, b: &mut DVector<f64>) {
        self.factor.solve_mut(b);
    }
}
