//! Compressed sparse row storage, Dirichlet row replacement and direct solves.

use std::collections::{BTreeMap, BTreeSet};

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Par};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("matrix is {rows}x{cols}, right-hand side has length {rhs}")]
    Shape { rows: usize, cols: usize, rhs: usize },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("linear solve did not reach the residual target: relative residual {residual:e}")]
    Residual { residual: f64 },
}

/// Required relative residual of every linear solve.
pub const RESIDUAL_TARGET: f64 = 1e-10;

/// Accumulates `(row, col, value)` entries; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn build(mut self) -> SparseMatrix {
        // stable sort keeps the summation order of duplicates fixed
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut b = TripletBuilder::new(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            b.push(i, i, v);
        }
        b.build()
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut b = TripletBuilder::new(rows.len(), ncols);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over the stored entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            d[i][j] += v;
        }
        d
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[j] += v * y[i];
            }
        }
        out
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut b = TripletBuilder::new(self.ncols, self.nrows);
        for (i, j, v) in self.triplets() {
            b.push(j, i, v);
        }
        b.build()
    }

    pub fn scale(&self, s: f64) -> SparseMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &SparseMatrix, s: f64) -> SparseMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut b = TripletBuilder::new(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            b.push(i, j, v);
        }
        for (i, j, v) in other.triplets() {
            b.push(i, j, s * v);
        }
        b.build()
    }

    /// `self * other`.
    pub fn matmul(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut b = TripletBuilder::new(self.nrows, other.ncols);
        for i in 0..self.nrows {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (k, a) in self.row(i) {
                for (j, v) in other.row(k) {
                    *acc.entry(j).or_default() += a * v;
                }
            }
            for (j, v) in acc {
                b.push(i, j, v);
            }
        }
        b.build()
    }

    pub fn trace(&self) -> f64 {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Max |A - A^T| relative to max |A|.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let diff = self.add_scaled(&t, -1.0);
        let scale = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let d = diff.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            d
        } else {
            d / scale
        }
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, SolveError> {
        let t: Vec<Triplet<usize, usize, f64>> = self
            .triplets()
            .map(|(i, j, v)| Triplet::new(i, j, v))
            .collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| SolveError::Factorization(format!("{e:?}")))
    }
}

/// Replaces the rows of `dofs` by identity rows and sets the right-hand side
/// there to the given values. With `symmetric`, the matching columns are
/// zeroed as well and their contribution is moved to the right-hand side, so
/// a symmetric matrix stays symmetric.
pub fn apply_dirichlet(
    matrix: &SparseMatrix,
    rhs: &mut [f64],
    dofs: &BTreeMap<usize, f64>,
    symmetric: bool,
) -> SparseMatrix {
    let n = matrix.nrows();
    let mut b = TripletBuilder::new(n, matrix.ncols());
    for i in 0..n {
        if dofs.contains_key(&i) {
            continue;
        }
        for (j, v) in matrix.row(i) {
            match dofs.get(&j) {
                Some(&g) if symmetric => rhs[i] -= v * g,
                _ => b.push(i, j, v),
            }
        }
    }
    for (&i, &g) in dofs {
        b.push(i, i, 1.0);
        rhs[i] = g;
    }
    b.build()
}

/// Sets the given entries of a vector to zero.
pub fn zero_entries(v: &mut [f64], dofs: &BTreeSet<usize>) {
    for &i in dofs {
        v[i] = 0.0;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sparse LU factorization (row pivoting) of a square matrix.
pub struct Factorization {
    matrix: SparseMatrix,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization")
            .field("n", &self.matrix.nrows())
            .finish()
    }
}

impl Factorization {
    pub fn new(matrix: &SparseMatrix) -> Result<Self, SolveError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(SolveError::Shape {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
                rhs: matrix.nrows(),
            });
        }
        if !matrix.is_finite() {
            return Err(SolveError::Factorization("non-finite matrix entry".into()));
        }
        // sequential factorization keeps results bit-for-bit reproducible
        faer::set_global_parallelism(Par::Seq);
        let lu = matrix
            .to_faer()?
            .sp_lu()
            .map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
        Ok(Self {
            matrix: matrix.clone(),
            lu,
        })
    }

    fn raw_solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Col::from_fn(b.len(), |i| b[i]);
        let x = self.lu.solve(&rhs);
        (0..b.len()).map(|i| x[i]).collect()
    }

    /// Solves `A x = b`, with up to two steps of iterative refinement, and
    /// checks the relative residual against [`RESIDUAL_TARGET`].
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
        let n = self.matrix.nrows();
        if b.len() != n {
            return Err(SolveError::Shape {
                rows: n,
                cols: n,
                rhs: b.len(),
            });
        }
        let bnorm = norm(b);
        if bnorm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut x = self.raw_solve(b);
        let mut residual = f64::INFINITY;
        for _ in 0..3 {
            let ax = self.matrix.matvec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            residual = norm(&r) / bnorm;
            if !residual.is_finite() {
                break;
            }
            if residual <= 1e-3 * RESIDUAL_TARGET {
                return Ok(x);
            }
            let dx = self.raw_solve(&r);
            let candidate: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + d).collect();
            let rc: Vec<f64> = b
                .iter()
                .zip(self.matrix.matvec(&candidate))
                .map(|(bi, ai)| bi - ai)
                .collect();
            let res_c = norm(&rc) / bnorm;
            if res_c < residual {
                x = candidate;
                residual = res_c;
            } else {
                break;
            }
        }
        if residual.is_finite() && residual <= RESIDUAL_TARGET {
            Ok(x)
        } else {
            Err(SolveError::Residual { residual })
        }
    }
}

/// One-shot direct solve with the residual contract.
pub fn solve_linear(matrix: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>, SolveError> {
    Factorization::new(matrix)?.solve(rhs)
}
