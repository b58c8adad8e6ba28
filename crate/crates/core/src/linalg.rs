//! Dense row-major matrices and the matrix norms used by the bounds.
//!
//! Conventions follow the column-then-vector definition of the `(p, q)`
//! norm: `‖W‖_{p,q} = ‖[‖W_{:,1}‖_p, …, ‖W_{:,d}‖_p]‖_q`. Two special cases
//! show up everywhere in the crate:
//!
//! * `‖W‖_{1,∞}`: largest column ℓ1 norm ([`Matrix::max_col_l1`]), the
//!   ℓ1→ℓ1 operator norm.
//! * `‖Wᵀ‖_{1,∞}`: largest row ℓ1 norm ([`Matrix::max_row_l1`]), the
//!   ℓ∞→ℓ∞ operator norm.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative tolerance for [`spectral_norm`].
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Default iteration cap for [`spectral_norm`].
pub const SPECTRAL_MAX_ITERS: usize = 1000;

/// Order of a vector norm inside a matrix `(p, q)` norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    One,
    Two,
    Inf,
}

/// Dense matrix of `f64` stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries, checking shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "Matrix::new",
                format!("{} entries ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "matrix" });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from nested rows. All rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dimension(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape("axpy", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute entry difference to a matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `W x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dimension("matvec", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `Wᵀ y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::dimension("matvec_transposed", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                for (o, w) in out.iter_mut().zip(self.row(r)) {
                    *o += yr * w;
                }
            }
        }
        Ok(out)
    }

    /// `A B`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dimension(
                "matmul",
                format!("{} rows on the right", self.cols),
                other.rows,
            ));
        }
        Ok(gemm(self, false, other, false))
    }

    /// `A Bᵀ`.
    pub fn matmul_transpose_b(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dimension(
                "matmul_transpose_b",
                format!("{} columns on the right", self.cols),
                other.cols,
            ));
        }
        Ok(gemm(self, false, other, true))
    }

    /// `Aᵀ B`.
    pub fn matmul_transpose_a(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dimension(
                "matmul_transpose_a",
                format!("{} rows on the right", self.rows),
                other.rows,
            ));
        }
        Ok(gemm(self, true, other, false))
    }

    /// ℓ1 norm of every row.
    pub fn row_l1_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|r| l1(self.row(r))).collect()
    }

    /// ℓ1 norm of every column.
    pub fn col_l1_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v.abs();
            }
        }
        out
    }

    /// `‖Wᵀ‖_{1,∞}` with the index of the maximizing row (lowest on ties).
    pub fn max_row_l1(&self) -> (usize, f64) {
        argmax(&self.row_l1_norms())
    }

    /// `‖W‖_{1,∞}` with the index of the maximizing column (lowest on ties).
    pub fn max_col_l1(&self) -> (usize, f64) {
        argmax(&self.col_l1_norms())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Matrix {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let n = if trans_b { b.rows } else { b.cols };
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides describe the row-major buffers of `a` and `b` (possibly
    // read transposed) and the freshly allocated m x n buffer of `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

#[inline]
pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn vector_norm(v: &[f64], order: NormOrder) -> f64 {
    match order {
        NormOrder::One => l1(v),
        NormOrder::Two => l2(v),
        NormOrder::Inf => linf(v),
    }
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// `‖W‖_{p,q}`: the `q`-norm of the vector of column `p`-norms.
pub fn matrix_pq_norm(w: &Matrix, p: NormOrder, q: NormOrder) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let col_norms: Vec<f64> = match p {
        NormOrder::One => w.col_l1_norms(),
        _ => (0..w.cols())
            .map(|c| vector_norm(&w.column(c), p))
            .collect(),
    };
    Ok(vector_norm(&col_norms, q))
}

/// Largest singular value by power iteration on `WᵀW`.
///
/// Starts from the normalized all-ones vector and stops once two successive
/// estimates agree to `tol` relatively. On failure the error carries the last
/// estimate.
pub fn spectral_norm(w: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "spectral norm tolerance must be positive, got {tol}"
        )));
    }
    if w.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if w.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let n = w.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    // The all-ones start can be orthogonal to the row space (e.g. [1, -1]);
    // fall back to basis vectors in order until one is not annihilated.
    let mut fallback = 0;
    let mut estimate = 0.0;
    for iter in 0..max_iters {
        let u = w.matvec(&v)?;
        let sigma = l2(&u);
        let mut next = w.matvec_transposed(&u)?;
        let norm = l2(&next);
        if norm == 0.0 {
            if fallback >= n {
                return Ok(0.0);
            }
            v = vec![0.0; n];
            v[fallback] = 1.0;
            fallback += 1;
            continue;
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        v = next;
        if iter > 0 && (sigma - estimate).abs() < tol * sigma {
            return Ok(sigma);
        }
        estimate = sigma;
    }
    Err(Error::NoConvergence {
        estimate,
        iterations: max_iters,
    })
}

/// [`spectral_norm`] with the default tolerance and iteration cap. A
/// non-converged run still returns its last estimate.
pub fn spectral_norm_default(w: &Matrix) -> f64 {
    match spectral_norm(w, SPECTRAL_TOL, SPECTRAL_MAX_ITERS) {
        Ok(s) => s,
        Err(Error::NoConvergence { estimate, .. }) => estimate,
        Err(_) => 0.0,
    }
}
