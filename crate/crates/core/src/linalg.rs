//! Small dense matrix helpers.
//!
//! Matrices here are at most a few hundred rows, so everything is plain
//! `ndarray` with straightforward loops. Eigenvalues are delegated to
//! `nalgebra` and always computed in `f64`.

use nalgebra::{Complex, DMatrix};
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `(m + mᵀ) / 2`.
pub fn symmetric_part<T: Real>(m: ArrayView2<'_, T>) -> Array2<T> {
    let half = T::lit(0.5);
    let (r, c) = m.dim();
    assert_eq!(r, c, "symmetric part of a non-square matrix");
    Array2::from_shape_fn((r, c), |(i, j)| (m[[i, j]] + m[[j, i]]) * half)
}

pub fn frobenius<T: Real>(m: ArrayView2<'_, T>) -> T {
    m.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Frobenius norm of `m - mᵀ`.
pub fn asymmetry<T: Real>(m: ArrayView2<'_, T>) -> T {
    let (r, c) = m.dim();
    assert_eq!(r, c);
    let mut acc = T::zero();
    for i in 0..r {
        for j in 0..c {
            let d = m[[i, j]] - m[[j, i]];
            acc += d * d;
        }
    }
    acc.sqrt()
}

/// Maximum absolute column sum.
pub fn norm_1<T: Real>(m: ArrayView2<'_, T>) -> T {
    m.columns()
        .into_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<T>())
        .fold(T::zero(), T::max)
}

/// Maximum absolute row sum.
pub fn norm_inf<T: Real>(m: ArrayView2<'_, T>) -> T {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<T>())
        .fold(T::zero(), T::max)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Real>(a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) {
            return Err(Error::NotSpd);
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `(L Lᵀ) x = b` column by column given the lower factor `L`.
pub fn cholesky_solve<T: Real>(l: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let n = l.nrows();
    assert_eq!(b.nrows(), n);
    let mut x = b.to_owned();
    for mut col in x.columns_mut() {
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[[i, k]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
    }
    x
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse<T: Real>(a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let l = cholesky(a)?;
    Ok(cholesky_solve(l.view(), Array2::eye(a.nrows()).view()))
}

pub fn to_nalgebra<T: Real>(m: ArrayView2<'_, T>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]].as_f64())
}

/// All eigenvalues of a general square matrix.
pub fn eigenvalues<T: Real>(m: ArrayView2<'_, T>) -> Vec<Complex<f64>> {
    to_nalgebra(m).complex_eigenvalues().iter().copied().collect()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues<T: Real>(m: ArrayView2<'_, T>) -> Vec<f64> {
    let mut ev: Vec<f64> = to_nalgebra(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn matvec_into<T: Real>(m: ArrayView2<'_, T>, x: &[T], out: &mut [T]) {
    for (i, row) in m.rows().into_iter().enumerate() {
        out[i] = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Compressed sparse row matrix; used for the constant PN transport operators
/// inside the solver, where dense products would dominate the runtime.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    /// Keeps entries with `|a_ij| > drop_tol`.
    pub fn from_dense(m: ArrayView2<'_, T>, drop_tol: T) -> Self {
        let (nrows, ncols) = m.dim();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v.abs() > drop_tol {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    #[inline]
    pub fn row_dot(&self, row: usize, x: &[T]) -> T {
        let mut s = T::zero();
        for k in self.row_ptr[row]..self.row_ptr[row + 1] {
            s += self.values[k] * x[self.col_idx[k]];
        }
        s
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut m = Array2::zeros((self.nrows, self.ncols));
        for i in 0..self.nrows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[[i, self.col_idx[k]]] = self.values[k];
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

pub fn outer<T: Real>(a: &[T], b: &[T]) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

pub fn to_array1<T: Real>(v: &[T]) -> Array1<T> {
    Array1::from(v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_round_trip() {
        let a: Array2<f64> = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        let inv = spd_inverse(a.view()).unwrap();
        let id = a.dot(&inv);
        for ((i, j), v) in id.indexed_iter() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(cholesky(a.view()), Err(Error::NotSpd)));
    }

    #[test]
    fn norms_and_symmetry() {
        let m = array![[1.0, -2.0], [0.0, 3.0]];
        assert_eq!(norm_1(m.view()), 5.0);
        assert_eq!(norm_inf(m.view()), 3.0);
        assert_eq!(symmetric_part(m.view()), array![[1.0, -1.0], [-1.0, 3.0]]);
        assert!((asymmetry(m.view()) - 8.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csr_matches_dense() {
        let m = array![[0.0, 1.5, 0.0], [2.0, 0.0, -1.0]];
        let s = CsrMatrix::from_dense(m.view(), 0.0);
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.to_dense(), m);
        assert_eq!(s.row_dot(1, &[1.0, 5.0, 2.0]), 0.0);
    }
}
