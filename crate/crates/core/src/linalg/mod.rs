//! Dense real linear algebra on small matrices.
//!
//! Everything the spectral and bound machinery needs: a row-major [`Matrix`],
//! a [`Vector`] newtype, a cyclic Jacobi symmetric eigensolver, the logarithmic
//! 2-norm [`mu2`] and singular-value extremes. No external numeric crates.

mod eigen;
pub(crate) mod text;

pub use eigen::{eig_sym, leading_eigenpair, sym_eigenvalues, EigenResult};

use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{Error, Result};

/// Off-diagonal threshold of the Jacobi sweep, relative to the Frobenius norm.
pub const EIG_OFFDIAG_TOL: f64 = 1e-14;
/// Largest admissible asymmetry `|s_ij - s_ji|` (relative to `max(1, max|s|)`).
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Sweep cap for the Jacobi iteration; convergence is quadratic so this is never hit
/// on finite input.
pub const EIG_MAX_SWEEPS: usize = 100;

/// Dense real matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Matrix {
    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "matrix entry ({}, {}) is not finite",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, rhs.row(k), orow);
                }
            }
        }
        Ok(out)
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::dim(format!(
                "{}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(Vector((0..self.rows).map(|i| dot(self.row(i), x)).collect()))
    }

    /// `Aᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.rows {
            return Err(Error::dim(format!(
                "transpose of {}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        Ok(Vector(out))
    }

    /// `AᵀA`, computed so the result is exactly symmetric.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..self.rows)
                    .map(|k| self.data[k * n + i] * self.data[k * n + j])
                    .sum();
                g.data[i * n + j] = s;
                g.data[j * n + i] = s;
            }
        }
        g
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(format!(
                "shapes {:?} and {:?} differ",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| c * v).collect())
    }

    /// `self += c · rhs` for equally shaped matrices.
    pub fn add_scaled(&mut self, c: f64, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "add_scaled shape mismatch");
        axpy(c, &rhs.data, &mut self.data);
    }

    /// `D A` for a diagonal `D` given by its entries.
    pub fn scale_rows(&self, diag: &[f64]) -> Matrix {
        assert_eq!(diag.len(), self.rows, "scale_rows length mismatch");
        let mut out = self.clone();
        for (i, &d) in diag.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= d);
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Frobenius inner product.
    pub fn inner(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "inner product shape mismatch");
        dot(&self.data, &rhs.data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of range");
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of range");
        &mut self.data[i * self.cols + j]
    }
}

impl Vector {
    /// Builds a vector, rejecting non-finite entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("vector entry {i} is not finite")));
        }
        Ok(Self(data))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn filled(n: usize, v: f64) -> Self {
        Self(vec![v; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.0)
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|v| c * v).collect())
    }

    pub fn sub(&self, rhs: &[f64]) -> Vector {
        assert_eq!(self.len(), rhs.len(), "vector length mismatch");
        Vector(self.0.iter().zip(rhs).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, rhs: &[f64]) -> Vector {
        assert_eq!(self.len(), rhs.len(), "vector length mismatch");
        Vector(self.0.iter().zip(rhs).map(|(a, b)| a + b).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Euclidean distance between two equally long slices.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric part `(A + Aᵀ)/2`; the result is symmetric bit for bit.
pub fn sym(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::dim(format!(
            "symmetric part needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    Ok(sym_unchecked(a))
}

pub(crate) fn sym_unchecked(a: &Matrix) -> Matrix {
    let n = a.rows;
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        s.data[i * n + i] = a.data[i * n + i];
        for j in i + 1..n {
            let v = 0.5 * (a.data[i * n + j] + a.data[j * n + i]);
            s.data[i * n + j] = v;
            s.data[j * n + i] = v;
        }
    }
    s
}

/// Logarithmic 2-norm: the largest eigenvalue of the symmetric part.
pub fn mu2(a: &Matrix) -> Result<f64> {
    let s = sym(a)?;
    Ok(max_eigenvalue(&s))
}

pub(crate) fn max_eigenvalue(s: &Matrix) -> f64 {
    sym_eigenvalues(s)
        .last()
        .copied()
        .unwrap_or(f64::NEG_INFINITY)
}

/// `(σ_min, σ_max)` from the extreme eigenvalues of `AᵀA`.
///
/// The smallest singular value is taken over all `cols` directions, so a
/// wide matrix reports `σ_min = 0`. Squaring halves the attainable relative
/// accuracy of small singular values (fine for condition numbers below ~1e6).
pub fn sigma_extremes(a: &Matrix) -> (f64, f64) {
    if a.cols == 0 {
        return (0.0, 0.0);
    }
    let ev = sym_eigenvalues(&a.gram());
    let lo = ev.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let hi = ev.last().copied().unwrap_or(0.0).max(0.0).sqrt();
    (lo, hi)
}

pub fn spectral_norm(a: &Matrix) -> f64 {
    sigma_extremes(a).1
}
