//! Compressed sparse column storage and a symmetric factorization wrapper.
//!
//! The factorizations are backed by faer's AMD-ordered supernodal Cholesky.
//! All numeric work runs sequentially so results do not depend on the
//! thread pool that happens to be active.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::perm::PermRef;
use faer::sparse::linalg::amd;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, LdltRef, LltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("symbolic analysis failed: {0}")]
    Symbolic(String),
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),
    #[error("zero pivot at {0}")]
    ZeroPivot(usize),
    #[error("pattern mismatch: factor expects {expected} stored entries, got {got}")]
    PatternMismatch { expected: usize, got: usize },
}

/// Sparse matrix in CSC layout with sorted, duplicate-free row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed in the order they appear, so the result is deterministic.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        // counting sort by column keeps the input order within a column
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let k = next[c];
            rows[k] = r;
            vals[k] = v;
            next[c] += 1;
        }

        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            let (lo, hi) = (counts[c], counts[c + 1]);
            order.clear();
            order.extend(lo..hi);
            order.sort_by_key(|&k| rows[k]); // stable
            let mut last: Option<usize> = None;
            for &k in &order {
                if last == Some(rows[k]) {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    row_idx.push(rows[k]);
                    values.push(vals[k]);
                    last = Some(rows[k]);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        match self.row_idx[range.clone()].binary_search(&row) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Position of `(row, col)` in `values`, if stored.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        self.row_idx[range.clone()]
            .binary_search(&row)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            for (r, v) in self.column(c) {
                y[r] += v * xc;
            }
        }
        y
    }

    /// `y = Aᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|c| self.column(c).map(|(r, v)| v * x[r]).sum())
            .collect()
    }

    /// `y = A x` for a symmetric matrix of which only the lower triangle is stored.
    pub fn sym_lower_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.nrows, self.ncols);
        let mut y = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                trip.push((c, r, v));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, &trip)
    }

    /// Keeps the entries with `row >= col`.
    pub fn lower_triangle(&self) -> Self {
        let mut trip = Vec::new();
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                if r >= c {
                    trip.push((r, c, v));
                }
            }
        }
        Self::from_triplets(self.nrows, self.ncols, &trip)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    fn faer_symbolic(&self) -> SymbolicSparseColMatRef<'_, usize> {
        SymbolicSparseColMatRef::new_checked(
            self.nrows,
            self.ncols,
            &self.col_ptr,
            None,
            &self.row_idx,
        )
    }

    fn faer_ref(&self) -> SparseColMatRef<'_, usize, f64> {
        SparseColMatRef::new(self.faer_symbolic(), &self.values)
    }
}

/// Fill-reducing symbolic analysis of a symmetric pattern (lower triangle).
/// Can be shared by every numeric factorization with the same pattern.
#[derive(Debug, Clone)]
pub struct SymbolicFactor {
    inner: Arc<SymbolicCholesky<usize>>,
    nnz: usize,
}

impl SymbolicFactor {
    pub fn analyze(lower: &CscMatrix) -> Result<Self, FactorError> {
        assert_eq!(lower.nrows, lower.ncols);
        let inner = factorize_symbolic_cholesky(
            lower.faer_symbolic(),
            Side::Lower,
            SymmetricOrdering::Amd,
            Default::default(),
        )
        .map_err(|e| FactorError::Symbolic(format!("{e:?}")))?;
        Ok(Self {
            inner: Arc::new(inner),
            nnz: lower.nnz(),
        })
    }

    /// As [`analyze`](Self::analyze), but the last `trailing` rows are
    /// eliminated last, after an AMD ordering of the leading block. Used for
    /// quasi-definite matrices whose trailing diagonal is tiny and negative,
    /// where an early pivot there would wipe out the leading block.
    pub fn analyze_with_trailing(lower: &CscMatrix, trailing: usize) -> Result<Self, FactorError> {
        assert_eq!(lower.nrows, lower.ncols);
        let n = lower.nrows;
        assert!(trailing <= n);
        let k = n - trailing;
        let mut lead = Vec::new();
        for j in 0..k {
            for (i, _) in lower.column(j) {
                if i < k {
                    lead.push((i, j, 1.0));
                }
            }
        }
        let lead = CscMatrix::from_triplets(k, k, &lead);
        let mut fwd = vec![0usize; n];
        let mut inv = vec![0usize; n];
        if k > 0 {
            let mut mem = MemBuffer::new(amd::order_maybe_unsorted_scratch::<usize>(k, lead.nnz()));
            amd::order_maybe_unsorted(
                &mut fwd[..k],
                &mut inv[..k],
                lead.faer_symbolic(),
                amd::Control::default(),
                MemStack::new(&mut mem),
            )
            .map_err(|e| FactorError::Symbolic(format!("{e:?}")))?;
        }
        for i in k..n {
            fwd[i] = i;
            inv[i] = i;
        }
        let inner = factorize_symbolic_cholesky(
            lower.faer_symbolic(),
            Side::Lower,
            SymmetricOrdering::Custom(PermRef::new_checked(&fwd, &inv, n)),
            Default::default(),
        )
        .map_err(|e| FactorError::Symbolic(format!("{e:?}")))?;
        Ok(Self {
            inner: Arc::new(inner),
            nnz: lower.nnz(),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    /// Number of stored entries of the Cholesky factor.
    pub fn factor_len(&self) -> usize {
        self.inner.len_val()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactorKind {
    Llt,
    Ldlt,
}

/// Numeric `LLᵀ` or `LDLᵀ` factorization of a symmetric sparse matrix.
#[derive(Debug, Clone)]
pub struct SymmetricFactor {
    symbolic: SymbolicFactor,
    values: Vec<f64>,
    kind: FactorKind,
}

impl SymmetricFactor {
    /// Cholesky factorization of a symmetric positive definite matrix given
    /// by its lower triangle.
    pub fn cholesky(lower: &CscMatrix) -> Result<Self, FactorError> {
        let symbolic = SymbolicFactor::analyze(lower)?;
        Self::cholesky_with(&symbolic, lower)
    }

    pub fn cholesky_with(symbolic: &SymbolicFactor, lower: &CscMatrix) -> Result<Self, FactorError> {
        check_pattern(symbolic, lower)?;
        let par = Par::Seq;
        let mut values = vec![0.0; symbolic.inner.len_val()];
        let mut mem = MemBuffer::new(
            symbolic
                .inner
                .factorize_numeric_llt_scratch::<f64>(par, Default::default()),
        );
        symbolic
            .inner
            .factorize_numeric_llt::<f64>(
                &mut values,
                lower.faer_ref(),
                Side::Lower,
                LltRegularization::default(),
                par,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| match e {
                faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index } => {
                    FactorError::NotPositiveDefinite(index)
                }
            })?;
        Ok(Self {
            symbolic: symbolic.clone(),
            values,
            kind: FactorKind::Llt,
        })
    }

    /// `LDLᵀ` factorization without pivoting, for quasi-definite matrices.
    /// `signs[i]` is the expected sign of pivot `i` (in the original
    /// ordering); pivots that come out with the wrong sign or smaller than
    /// `epsilon` are replaced by `±delta`.
    pub fn ldlt_with(
        symbolic: &SymbolicFactor,
        lower: &CscMatrix,
        signs: &[i8],
        delta: f64,
        epsilon: f64,
    ) -> Result<(Self, usize), FactorError> {
        check_pattern(symbolic, lower)?;
        assert_eq!(signs.len(), lower.nrows);
        let par = Par::Seq;
        let mut values = vec![0.0; symbolic.inner.len_val()];
        let mut mem = MemBuffer::new(
            symbolic
                .inner
                .factorize_numeric_ldlt_scratch::<f64>(par, Default::default()),
        );
        let info = {
            let reg = LdltRegularization {
                dynamic_regularization_signs: Some(signs),
                dynamic_regularization_delta: delta,
                dynamic_regularization_epsilon: epsilon,
            };
            let r = symbolic.inner.factorize_numeric_ldlt::<f64>(
                &mut values,
                lower.faer_ref(),
                Side::Lower,
                reg,
                par,
                MemStack::new(&mut mem),
                Default::default(),
            );
            match r {
                Ok(_) => 0,
                Err(faer::linalg::cholesky::ldlt::factor::LdltError::ZeroPivot { index }) => {
                    return Err(FactorError::ZeroPivot(index))
                }
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FactorError::ZeroPivot(usize::MAX));
        }
        Ok((
            Self {
                symbolic: symbolic.clone(),
                values,
                kind: FactorKind::Ldlt,
            },
            info,
        ))
    }

    pub fn dim(&self) -> usize {
        self.symbolic.dim()
    }

    /// Solves in place for a column-major block of right-hand sides.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.dim();
        assert!(n > 0 && rhs.len() % n == 0);
        let k = rhs.len() / n;
        let par = Par::Seq;
        let mut mem = MemBuffer::new(self.symbolic.inner.solve_in_place_scratch::<f64>(k, par));
        let stack = MemStack::new(&mut mem);
        let mat = MatMut::from_column_major_slice_mut(rhs, n, k);
        match self.kind {
            FactorKind::Llt => LltRef::new(&self.symbolic.inner, &self.values)
                .solve_in_place_with_conj(Conj::No, mat, par, stack),
            FactorKind::Ldlt => LdltRef::new(&self.symbolic.inner, &self.values)
                .solve_in_place_with_conj(Conj::No, mat, par, stack),
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

fn check_pattern(symbolic: &SymbolicFactor, lower: &CscMatrix) -> Result<(), FactorError> {
    if symbolic.nnz != lower.nnz() || symbolic.dim() != lower.nrows {
        return Err(FactorError::PatternMismatch {
            expected: symbolic.nnz,
            got: lower.nnz(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> CscMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i + 1 < n {
                t.push((i + 1, i, -1.0));
                t.push((i, i + 1, -1.0));
            }
        }
        CscMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = CscMatrix::from_triplets(3, 2, &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 3.0), (1, 1, 5.0)]);
        assert_eq!(m.col_ptr, vec![0, 2, 3]);
        assert_eq!(m.row_idx, vec![0, 2, 1]);
        assert_eq!(m.values, vec![2.0, 4.0, 5.0]);
        assert_eq!(m.get(2, 0), 4.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn products_match_dense() {
        let m = CscMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 2, 2.0), (0, 1, -1.0)]);
        assert_eq!(m.mul_vec(&[1.0, 2.0, 3.0]), vec![-1.0, 6.0]);
        assert_eq!(m.tr_mul_vec(&[1.0, 1.0]), vec![1.0, -1.0, 2.0]);
        assert_eq!(m.transpose().mul_vec(&[1.0, 1.0]), vec![1.0, -1.0, 2.0]);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = laplacian_1d(50, 0.1);
        let f = SymmetricFactor::cholesky(&a.lower_triangle()).unwrap();
        let x_true: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.mul_vec(&x_true);
        let x = f.solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = laplacian_1d(5, -3.0);
        assert!(SymmetricFactor::cholesky(&a.lower_triangle()).is_err());
    }

    #[test]
    fn ldlt_handles_quasi_definite() {
        // [[4, 1, 1], [1, 3, 0], [1, 0, -2]]
        let a = CscMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 4.0), (1, 0, 1.0), (2, 0, 1.0), (1, 1, 3.0), (2, 2, -2.0)],
        );
        let sym = SymbolicFactor::analyze(&a).unwrap();
        let (f, _) = SymmetricFactor::ldlt_with(&sym, &a, &[1, 1, -1], 1e-10, 1e-14).unwrap();
        let x = f.solve(&[6.0, 4.0, -1.0]);
        let y = a.sym_lower_mul_vec(&x);
        for (u, v) in y.iter().zip(&[6.0, 4.0, -1.0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
