//! Small dense linear algebra kernel: row-major matrices, LU factorization
//! with partial pivoting, and a power-iteration spectral radius estimate.
//!
//! Problem sizes here are desk scale (a few hundred rows), so dense direct
//! methods are both exact enough and fast enough.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// `self * v` for a column vector `v`.
    pub fn mat_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols, "mat_vec dimension");
        let mut out = vec![T::zero(); self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = T::zero();
            for c in 0..self.cols {
                acc += row[c] * v[c];
            }
            out[r] = acc;
        }
        out
    }

    /// `self^T * v` without materializing the transpose.
    pub fn transpose_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.rows, "transpose_vec dimension");
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let vr = v[r];
            if vr != T::zero() {
                for c in 0..self.cols {
                    out[c] += row[c] * vr;
                }
            }
        }
        out
    }

    /// Element-wise product with another matrix of the same shape.
    pub fn hadamard(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "hadamard shape");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// LU decomposition with partial pivoting of a square matrix.
pub struct LuFactors<T> {
    lu: Mat<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> LuFactors<T> {
    pub fn factorize(m: &Mat<T>) -> Result<Self> {
        assert_eq!(m.rows, m.cols, "LU requires a square matrix");
        let n = m.rows;
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..n {
            let mut pivot_row = k;
            let mut pivot_val = lu[(k, k)].abs();
            for r in k + 1..n {
                let v = lu[(r, k)].abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = r;
                }
            }
            if pivot_val < T::from_f64(1e-300) {
                return Err(Error::SingularSystem);
            }
            if pivot_row != k {
                perm.swap(k, pivot_row);
                for c in 0..n {
                    let tmp = lu[(k, c)];
                    lu[(k, c)] = lu[(pivot_row, c)];
                    lu[(pivot_row, c)] = tmp;
                }
            }
            let pivot = lu[(k, k)];
            for r in k + 1..n {
                let factor = lu[(r, k)] / pivot;
                lu[(r, k)] = factor;
                if factor != T::zero() {
                    for c in k + 1..n {
                        let delta = factor * lu[(k, c)];
                        lu[(r, c)] -= delta;
                    }
                }
            }
        }
        Ok(LuFactors { lu, perm })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lu.rows;
        assert_eq!(b.len(), n, "rhs dimension");
        let mut y: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 1..n {
            let mut acc = y[r];
            for c in 0..r {
                acc -= self.lu[(r, c)] * y[c];
            }
            y[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = y[r];
            for c in r + 1..n {
                acc -= self.lu[(r, c)] * y[c];
            }
            y[r] = acc / self.lu[(r, r)];
        }
        y
    }

    pub fn inverse(&self) -> Mat<T> {
        let n = self.lu.rows;
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for c in 0..n {
            e[c] = T::one();
            let col = self.solve(&e);
            e[c] = T::zero();
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv
    }
}

/// Solve `(I - gamma * P) x = b`.
pub fn solve_discounted<T: Scalar>(gamma: T, p: &Mat<T>, b: &[T]) -> Result<Vec<T>> {
    Ok(LuFactors::factorize(&discounted_system(gamma, p))?.solve(b))
}

/// `(I - gamma * P)^{-1}`, the discounted resolvent of `P`.
pub fn resolvent<T: Scalar>(gamma: T, p: &Mat<T>) -> Result<Mat<T>> {
    Ok(LuFactors::factorize(&discounted_system(gamma, p))?.inverse())
}

fn discounted_system<T: Scalar>(gamma: T, p: &Mat<T>) -> Mat<T> {
    assert_eq!(p.n_rows(), p.n_cols(), "square matrix expected");
    let n = p.n_rows();
    let mut m = Mat::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            m[(r, c)] = -gamma * p[(r, c)];
        }
        m[(r, r)] += T::one();
    }
    m
}

/// Power-iteration estimate of the spectral radius of a non-negative matrix.
///
/// A strictly positive start vector puts weight on every invariant block, so
/// the growth rate converges to the Perron root.
pub fn spectral_radius_estimate<T: Scalar>(m: &Mat<T>, iterations: usize) -> T {
    assert_eq!(m.n_rows(), m.n_cols());
    let n = m.n_rows();
    if n == 0 {
        return T::zero();
    }
    let mut v = vec![T::one() / T::from_f64(n as f64); n];
    let mut rate = T::zero();
    for _ in 0..iterations {
        let next = m.mat_vec(&v);
        let norm: T = next.iter().map(|x| x.abs()).sum();
        if norm < T::from_f64(1e-280) {
            return T::zero();
        }
        rate = norm;
        for (dst, src) in v.iter_mut().zip(&next) {
            *dst = *src / norm;
        }
    }
    rate
}

pub fn l1_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).sum()
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}
