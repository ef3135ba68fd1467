//! Dense symmetric linear algebra.
//!
//! Everything here works on small matrices (M ≤ 64 in practice), so the
//! representation is a plain row-major `Vec<f64>` and the eigensolver is the
//! cyclic Jacobi method.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Jacobi stops once the off-diagonal Frobenius norm drops below this
/// fraction of the input's Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-12;
/// Maximum number of full cyclic sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigenvalues in `[-NEG_EIG_TOL, 0]` are treated as roundoff and clamped.
pub const NEG_EIG_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NotConverged { sweeps: usize, off_norm: f64 },
    #[error("eigenvalue {index} is materially negative ({value:e}); fractional power undefined")]
    NegativeEigenvalue { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
    #[error("moving-average coefficient {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("matrix dimension must be at least 1")]
    Empty,
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row vectors. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `A v`
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `Aᵀ v`
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += s * vj;
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self ← a·self + b·other`
    pub fn blend_in_place(&mut self, a: f64, b: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x = a * *x + b * y;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric matrix. Construction averages `A` and `Aᵀ`, so the stored
/// entries are exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::NotSquare {
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        if m.rows() == 0 {
            return Err(LinalgError::Empty);
        }
        if !m.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let n = m.rows();
        let sym = Matrix::from_fn(n, n, |i, j| {
            if i == j {
                m[(i, i)]
            } else {
                0.5 * (m[(i, j)] + m[(j, i)])
            }
        });
        Ok(Self(sym))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diagonal().iter().sum()
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigendecomposition `A = U diag(λ) Uᵀ` with eigenvalues sorted descending.
#[derive(Clone, Debug)]
pub struct SymEigDecomp {
    /// Columns are eigenvectors.
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl SymEigDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U f(D) Uᵀ` for an eigenvalue map `f`.
    pub fn reassemble(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.dim();
        let mapped: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let u = &self.basis;
        Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| u[(i, k)] * mapped[k] * u[(j, k)]).sum()
        })
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reassemble(|l| l)
    }

    /// `Uᵀ v`: coordinates of `v` in the eigenbasis.
    pub fn to_eigenbasis(&self, v: &[f64]) -> Vec<f64> {
        self.basis.tr_matvec(v)
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps visit pairs `(p, q)` with `p < q` in row-major order, so the result
/// is a deterministic function of the input.
pub fn sym_eig(a: &SymMatrix) -> Result<SymEigDecomp, LinalgError> {
    let n = a.dim();
    let mut m = a.as_matrix().clone();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius();
    let tol = JACOBI_REL_TOL * scale;

    let mut off = off_diagonal_norm(&m);
    let mut sweeps = 0;
    while off > tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NotConverged {
                sweeps,
                off_norm: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
        sweeps += 1;
        off = off_diagonal_norm(&m);
    }

    let diag = m.diagonal();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the original index order for ties
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let basis = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigDecomp { basis, eigenvalues })
}

fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    // A ← A J
    for k in 0..n {
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        m[(k, p)] = c * akp - s * akq;
        m[(k, q)] = s * akp + c * akq;
    }
    // A ← Jᵀ A
    for k in 0..n {
        let apk = m[(p, k)];
        let aqk = m[(q, k)];
        m[(p, k)] = c * apk - s * aqk;
        m[(q, k)] = s * apk + c * aqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Rejects materially negative eigenvalues and clamps roundoff negatives to 0.
fn clamped_spectrum(decomp: &SymEigDecomp) -> Result<Vec<f64>, LinalgError> {
    decomp
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value < -NEG_EIG_TOL {
                Err(LinalgError::NegativeEigenvalue { index, value })
            } else {
                Ok(value.max(0.0))
            }
        })
        .collect()
}

/// `U clamp(D, 0)^α Uᵀ`, returned together with the decomposition it was
/// built from so callers can reuse the basis.
pub fn matrix_power_with_decomp(
    a: &SymMatrix,
    alpha: f64,
) -> Result<(SymMatrix, SymEigDecomp), LinalgError> {
    let mut decomp = sym_eig(a)?;
    decomp.eigenvalues = clamped_spectrum(&decomp)?;
    let powered = decomp.reassemble(|l| l.powf(alpha));
    Ok((SymMatrix::new(powered)?, decomp))
}

/// Fractional power of a positive semidefinite matrix.
pub fn matrix_power(a: &SymMatrix, alpha: f64) -> Result<SymMatrix, LinalgError> {
    matrix_power_with_decomp(a, alpha).map(|(m, _)| m)
}

/// `tau · estimate + (1 − tau) · batch_corr`
pub fn ema_update(
    estimate: &SymMatrix,
    batch_corr: &SymMatrix,
    tau: f64,
) -> Result<SymMatrix, LinalgError> {
    if estimate.dim() != batch_corr.dim() {
        return Err(LinalgError::DimMismatch {
            expected: estimate.dim(),
            found: batch_corr.dim(),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(LinalgError::InvalidTau(tau));
    }
    let mut m = estimate.as_matrix().clone();
    m.blend_in_place(tau, 1.0 - tau, batch_corr.as_matrix());
    SymMatrix::new(m)
}

/// `(1/B) Σ z zᵀ`
pub fn batch_correlation<V: AsRef<[f64]>>(batch: &[V]) -> Result<SymMatrix, LinalgError> {
    let first = batch.first().ok_or(LinalgError::EmptyBatch)?;
    let dim = first.as_ref().len();
    if dim == 0 {
        return Err(LinalgError::Empty);
    }
    let mut acc = Matrix::zeros(dim, dim);
    for z in batch {
        let z = z.as_ref();
        if z.len() != dim {
            return Err(LinalgError::DimMismatch {
                expected: dim,
                found: z.len(),
            });
        }
        acc.add_outer(1.0, z, z);
    }
    SymMatrix::new(acc.scaled(1.0 / batch.len() as f64))
}
