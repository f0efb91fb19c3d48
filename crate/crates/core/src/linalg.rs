//! Dense row-major matrices sized for the toy model.
//!
//! Everything here is deliberately small and allocation-friendly; the largest
//! matrix in a default run is the 64×16 token embedding table.

use std::fmt;

use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Mismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
}

/// A dense `rows × cols` matrix of `f64` stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self[(r, c)])?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.next_gaussian() * std)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<(), ShapeError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ShapeError::Mismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            })
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, ShapeError> {
        if self.cols != other.rows {
            return Err(ShapeError::Mismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, ShapeError> {
        if v.len() != self.cols {
            return Err(ShapeError::Mismatch {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), v))
            .collect())
    }

    /// `selfᵀ · v`.
    pub fn tmatvec(&self, v: &[f64]) -> Result<Vec<f64>, ShapeError> {
        if v.len() != self.rows {
            return Err(ShapeError::Mismatch {
                op: "tmatvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * vr;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, ShapeError> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, ShapeError> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|x| x * s).collect(),
            ..*self
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<(), ShapeError> {
        self.check_same(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds the outer product `s · u vᵀ` in place.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let f = s * ur;
            if f == 0.0 {
                continue;
            }
            let dst = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (d, &vc) in dst.iter_mut().zip(v) {
                *d += f * vc;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian bytes of the entries, row-major. Used for checksums.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix, ShapeError> {
        if self.cols != other.cols {
            return Err(ShapeError::Mismatch {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix, ShapeError> {
        if self.rows != other.rows {
            return Err(ShapeError::Mismatch {
                op: "hstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix::from_fn(self.rows, self.cols + other.cols, |r, c| {
            if c < self.cols {
                self[(r, c)]
            } else {
                other[(r, c - self.cols)]
            }
        }))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormalizes the columns of `m` in place (modified Gram-Schmidt, two
/// passes). A column that collapses numerically is replaced by the first
/// canonical basis vector that is not yet spanned, so the result always has
/// orthonormal columns as long as `cols ≤ rows`.
pub fn orthonormalize_columns(m: &mut Matrix) {
    let (rows, cols) = m.shape();
    assert!(cols <= rows, "cannot orthonormalize {cols} columns in R^{rows}");
    let mut basis_cursor = 0;
    for c in 0..cols {
        let mut v = m.column(c);
        let original = norm(&v);
        for _ in 0..2 {
            for p in 0..c {
                let q = m.column(p);
                let proj = dot(&q, &v);
                for (vi, qi) in v.iter_mut().zip(&q) {
                    *vi -= proj * qi;
                }
            }
        }
        let mut n = norm(&v);
        while n <= 1e-12 * original.max(1.0) {
            // Degenerate column: fall back to a canonical direction.
            assert!(basis_cursor < rows, "ran out of basis vectors");
            v = vec![0.0; rows];
            v[basis_cursor] = 1.0;
            basis_cursor += 1;
            for _ in 0..2 {
                for p in 0..c {
                    let q = m.column(p);
                    let proj = dot(&q, &v);
                    for (vi, qi) in v.iter_mut().zip(&q) {
                        *vi -= proj * qi;
                    }
                }
            }
            n = norm(&v);
        }
        for (r, vi) in v.iter().enumerate() {
            m[(r, c)] = vi / n;
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as columns.
pub fn symmetric_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.rows();
    assert_eq!(n, m.cols(), "symmetric_eigen needs a square matrix");
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let scale: f64 = a.as_slice().iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}
