//! Dense row-major matrices and a checked symmetric wrapper.
//!
//! Everything in the engine is 64-bit; callers holding f32 data upconvert
//! before entering the core. Matrices may have zero rows or columns (empty
//! factor sets and empty bases are legal states, not errors).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{CoreError, Result};

/// Relative tolerance for accepting a matrix as symmetric.
pub const SYM_TOL: f64 = 1e-12;

/// Dense `rows x cols` matrix of f64, row-major.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self[(i, j)])?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl core::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from a row-major buffer; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::Shape(alloc::format!(
                "buffer of {} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Convenience constructor from row slices (test and fixture use).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Mat::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
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

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable access to two distinct rows at once.
    pub fn two_rows_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        assert!(i < j, "rows must be ordered and distinct");
        let (head, tail) = self.data.split_at_mut(j * self.cols);
        (
            &mut head[i * self.cols..(i + 1) * self.cols],
            &mut tail[..self.cols],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul inner dims {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                let o_row = out.row_mut(i);
                for (j, &b_kj) in b_row.iter().enumerate() {
                    o_row[j] += a_ik * b_kj;
                }
            }
        }
        out
    }

    /// `selfᵀ * self` (Gram matrix of the columns), returned exactly symmetric.
    pub fn gram(&self) -> Mat {
        let n = self.cols;
        let mut g = Mat::zeros(n, n);
        for i in 0..self.rows {
            let row = self.row(i);
            for p in 0..n {
                let v = row[p];
                if v == 0.0 {
                    continue;
                }
                for q in p..n {
                    g[(p, q)] += v * row[q];
                }
            }
        }
        for p in 0..n {
            for q in (p + 1)..n {
                g[(q, p)] = g[(p, q)];
            }
        }
        g
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "add shape");
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "sub shape");
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    /// `self += s * other`, in place.
    pub fn add_scaled(&mut self, s: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.frobenius_norm_sq())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Trace of a square matrix.
    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace of non-square matrix");
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    /// Horizontal concatenation `[self | other]`; row counts must agree.
    pub fn hcat(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "hcat row count");
        let mut out = Mat::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.row_mut(i)[self.cols..].copy_from_slice(other.row(i));
        }
        out
    }
}

/// Square matrix guaranteed exactly symmetric by construction.
///
/// Inputs are accepted when `|a_ij - a_ji| <= SYM_TOL * max|a|` and stored as
/// `(A + Aᵀ)/2`, so downstream spectral routines never see round-off skew.
#[derive(Clone, PartialEq)]
pub struct SymMat {
    inner: Mat,
}

impl fmt::Debug for SymMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sym{:?}", self.inner)
    }
}

impl SymMat {
    /// Validate and symmetrize a square matrix.
    pub fn new(m: Mat) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(CoreError::Shape(alloc::format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(CoreError::InvalidInput(String::from(
                "matrix has non-finite entries",
            )));
        }
        let scale = m.max_abs();
        let tol = SYM_TOL * scale.max(f64::MIN_POSITIVE);
        let mut max_asym = 0.0_f64;
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if max_asym > tol {
            return Err(CoreError::NotSymmetric { max_asym, tol });
        }
        Ok(Self::symmetrize(m))
    }

    /// Force `(A + Aᵀ)/2` without an asymmetry check. For matrices that are
    /// symmetric by construction and only carry round-off skew.
    pub fn symmetrize(mut m: Mat) -> Self {
        let n = m.rows();
        debug_assert_eq!(n, m.cols());
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMat { inner: m }
    }

    pub fn identity(n: usize) -> Self {
        SymMat {
            inner: Mat::identity(n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        SymMat {
            inner: Mat::zeros(n, n),
        }
    }

    pub fn from_diag(values: &[f64]) -> Self {
        SymMat {
            inner: Mat::diag(values),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    #[inline]
    pub fn as_mat(&self) -> &Mat {
        &self.inner
    }

    pub fn into_mat(self) -> Mat {
        self.inner
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    pub fn scale(&self, s: f64) -> SymMat {
        SymMat {
            inner: self.inner.scale(s),
        }
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        SymMat {
            inner: self.inner.add(&other.inner),
        }
    }

    /// `self += s * other`, in place.
    pub fn add_scaled(&mut self, s: f64, other: &SymMat) {
        self.inner.add_scaled(s, &other.inner);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }
}

impl core::ops::Index<(usize, usize)> for SymMat {
    type Output = f64;
    #[inline]
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.inner[idx]
    }
}

/// Dot product of two equally sized slices.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
