//! Small dense complex linear algebra: row-major matrices and an LU
//! factorization with partial pivoting.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use num_complex::Complex64;
use num_traits::Zero;

use crate::error::{Error, Result};

/// Reciprocal condition numbers below this are treated as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn diag(values: &[Complex64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a.is_zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `self · v`, written into `out`.
    pub fn matvec_into(&self, v: &[Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self
                .row(i)
                .iter()
                .zip(v)
                .fold(Complex64::zero(), |acc, (a, x)| acc + a * x);
        }
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::zero(); self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    /// `selfᴴ · v`.
    pub fn matvec_adjoint(&self, v: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![Complex64::zero(); self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a.conj() * vi;
            }
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    /// Induced 1-norm (max absolute column sum).
    pub fn norm1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = Complex64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `P·A = L·U` with unit lower-triangular `L`, stored packed.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: CMat,
    /// Row `i` of `P·A` is row `perm[i]` of `A`.
    perm: Vec<usize>,
    rcond: f64,
}

impl Lu {
    /// Factorizes `a`, failing with [`Error::SingularMatrix`] when the
    /// reciprocal 1-norm condition estimate falls below [`RCOND_THRESHOLD`].
    pub fn factor(a: &CMat) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                expected: a.rows(),
                got: a.cols(),
            });
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (pivot, pmax) =
                (k..n)
                    .map(|i| (i, lu[(i, k)].norm()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 {
                return Err(Error::SingularMatrix { rcond: 0.0 });
            }
            if pivot != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(pivot, j)];
                    lu[(pivot, j)] = tmp;
                }
                perm.swap(k, pivot);
            }
            let inv = lu[(k, k)].inv();
            for i in k + 1..n {
                let f = lu[(i, k)] * inv;
                lu[(i, k)] = f;
                if f.is_zero() {
                    continue;
                }
                for j in k + 1..n {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= f * u;
                }
            }
        }
        let mut out = Self {
            n,
            lu,
            perm,
            rcond: 0.0,
        };
        let anorm = a.norm1();
        let inv_norm = out.inverse_norm1_estimate();
        out.rcond = if anorm == 0.0 || inv_norm == 0.0 {
            0.0
        } else {
            1.0 / (anorm * inv_norm)
        };
        if !(out.rcond >= RCOND_THRESHOLD) {
            return Err(Error::SingularMatrix { rcond: out.rcond });
        }
        Ok(out)
    }

    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    /// Solves `A x = b`.
    pub fn solve_vec(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let mut x: Vec<Complex64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    /// Solves `Aᴴ x = b`.
    pub fn solve_adjoint_vec(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        // Aᴴ = Uᴴ Lᴴ P
        let mut t = b.to_vec();
        for i in 0..n {
            let mut s = t[i];
            for j in 0..i {
                s -= self.lu[(j, i)].conj() * t[j];
            }
            t[i] = s / self.lu[(i, i)].conj();
        }
        for i in (0..n).rev() {
            let mut s = t[i];
            for j in i + 1..n {
                s -= self.lu[(j, i)].conj() * t[j];
            }
            t[i] = s;
        }
        let mut x = vec![Complex64::zero(); n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = t[i];
        }
        x
    }

    fn solve_columns(&self, b: &CMat, adjoint: bool) -> CMat {
        assert_eq!(b.rows(), self.n);
        let mut out = CMat::zeros(b.rows(), b.cols());
        let mut col = vec![Complex64::zero(); self.n];
        for j in 0..b.cols() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b[(i, j)];
            }
            let x = if adjoint {
                self.solve_adjoint_vec(&col)
            } else {
                self.solve_vec(&col)
            };
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &CMat) -> CMat {
        self.solve_columns(b, false)
    }

    /// Solves `Aᴴ X = B` column by column.
    pub fn solve_adjoint_mat(&self, b: &CMat) -> CMat {
        self.solve_columns(b, true)
    }

    // Hager's estimator for ||A^-1||_1, a handful of solves instead of an
    // explicit inverse.
    fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut x = vec![Complex64::new(1.0 / n as f64, 0.0); n];
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve_vec(&x);
            est = y.iter().map(|v| v.norm()).sum::<f64>();
            let xi: Vec<Complex64> = y
                .iter()
                .map(|v| {
                    let r = v.norm();
                    if r == 0.0 {
                        Complex64::new(1.0, 0.0)
                    } else {
                        v / r
                    }
                })
                .collect();
            let z = self.solve_adjoint_vec(&xi);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, v)| (j, v.norm()))
                .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| (a.conj() * b).re).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![Complex64::zero(); n];
            x[jmax] = Complex64::new(1.0, 0.0);
        }
        est
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sample() -> CMat {
        CMat::from_rows(
            3,
            3,
            alloc::vec![
                c(0.0, 1.0),
                c(2.0, 0.0),
                c(1.0, -1.0),
                c(4.0, 0.5),
                c(-1.0, 0.0),
                c(0.0, 0.0),
                c(1.0, 1.0),
                c(0.5, 0.5),
                c(3.0, 0.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn solve_and_adjoint_solve_residuals() {
        let a = sample();
        let lu = Lu::factor(&a).unwrap();
        let b = alloc::vec![c(1.0, 0.0), c(-2.0, 1.0), c(0.5, 0.25)];
        let x = lu.solve_vec(&b);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).norm() < 1e-12);
        }
        let y = lu.solve_adjoint_vec(&b);
        let r = a.matvec_adjoint(&y);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = CMat::from_rows(2, 2, alloc::vec![c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]).unwrap();
        assert!(matches!(Lu::factor(&a), Err(Error::SingularMatrix { .. })));
        let near = CMat::from_rows(
            2,
            2,
            alloc::vec![c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(1.0 + 1e-15, 0.0)],
        )
        .unwrap();
        assert!(matches!(Lu::factor(&near), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn rcond_estimate_is_exact_for_diagonal() {
        let a = CMat::diag(&[c(2.0, 0.0), c(0.0, 0.5), c(-4.0, 0.0)]);
        let lu = Lu::factor(&a).unwrap();
        // ||A||_1 = 4, ||A^-1||_1 = 2
        assert!((lu.rcond() - 1.0 / 8.0).abs() < 1e-12);
    }
}
