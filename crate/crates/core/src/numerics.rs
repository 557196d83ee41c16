//! Dense complex linear algebra used by the solvers.
//!
//! Everything here is small and dense (at most a few hundred rows), so the
//! kernels are straightforward row-major loops. Hermitian positive-definite
//! systems go through a Cholesky factorization; no routine ever forms an
//! explicit inverse.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use num_complex::Complex64;
use thiserror::Error;

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("matrix is not Hermitian (asymmetry {asymmetry:e})")]
    NotHermitian { asymmetry: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
}

/// Numerical tolerances shared by the library and its tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Cholesky rejects a pivot below `pivot_rel * max |diag|`.
    pub pivot_rel: f64,
    /// Relative tolerance for Hermitian checks.
    pub hermitian_rel: f64,
    /// Relative change of the Rayleigh quotient that stops power iteration.
    pub power_tol: f64,
    pub power_max_iter: usize,
    /// Relative power mismatch at which the multiplier bisection stops.
    pub bisection_tol: f64,
    /// Smallest multiplier interval the bisection will still split.
    pub bisection_min_interval: f64,
    /// Upper bound for the multiplier search before giving up.
    pub bisection_max_lambda: f64,
}

impl Tolerances {
    pub const DEFAULT: Tolerances = Tolerances {
        pivot_rel: 1e-14,
        hermitian_rel: 1e-12,
        power_tol: 1e-12,
        power_max_iter: 500,
        bisection_tol: 1e-9,
        bisection_min_interval: 1e-12,
        bisection_max_lambda: 1e18,
    };
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Complex column vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexVector(pub Vec<C64>);

impl ComplexVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![C64::new(0.0, 0.0); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `selfᴴ other`.
    pub fn dot(&self, other: &ComplexVector) -> C64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn scaled(&self, s: f64) -> ComplexVector {
        ComplexVector(self.0.iter().map(|z| z * s).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl From<Vec<C64>> for ComplexVector {
    fn from(v: Vec<C64>) -> Self {
        Self(v)
    }
}

impl Deref for ComplexVector {
    type Target = [C64];
    fn deref(&self) -> &[C64] {
        &self.0
    }
}

impl DerefMut for ComplexVector {
    fn deref_mut(&mut self) -> &mut [C64] {
        &mut self.0
    }
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
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

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn adjoint(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scaled(&self, s: f64) -> ComplexMatrix {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions");
        let mut out = ComplexMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Matrix-vector product `self * x`.
    pub fn mul_vec(&self, x: &[C64]) -> ComplexVector {
        assert_eq!(self.cols, x.len(), "mul_vec dimensions");
        ComplexVector(
            (0..self.rows)
                .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// `selfᴴ x`.
    pub fn adjoint_mul_vec(&self, x: &[C64]) -> ComplexVector {
        assert_eq!(self.rows, x.len(), "adjoint_mul_vec dimensions");
        let mut out = vec![C64::new(0.0, 0.0); self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a.conj() * xi;
            }
        }
        ComplexVector(out)
    }

    /// Adds `alpha * u uᴴ` in place.
    pub fn add_outer(&mut self, alpha: f64, u: &[C64]) {
        assert!(self.is_square() && u.len() == self.rows);
        let n = self.rows;
        for i in 0..n {
            let ui = u[i] * alpha;
            let row = &mut self.data[i * n..(i + 1) * n];
            for (r, uj) in row.iter_mut().zip(u) {
                *r += ui * uj.conj();
            }
        }
    }

    pub fn add_assign(&mut self, other: &ComplexMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Returns `self + shift * I`.
    pub fn shifted(&self, shift: f64) -> ComplexMatrix {
        assert!(self.is_square());
        let mut m = self.clone();
        for i in 0..self.rows {
            m[(i, i)] += shift;
        }
        m
    }

    /// Hermitian quadratic form `xᴴ self x`.
    pub fn quad_form(&self, x: &[C64]) -> C64 {
        let ax = self.mul_vec(x);
        x.iter().zip(ax.iter()).map(|(a, b)| a.conj() * b).sum()
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `‖self − selfᴴ‖_F`.
    pub fn hermitian_defect(&self) -> f64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += (self[(i, j)] - self[(j, i)].conj()).norm_sqr();
            }
        }
        s.sqrt()
    }

    pub fn is_hermitian(&self, rel_tol: f64) -> bool {
        self.is_square()
            && self.hermitian_defect() <= rel_tol * self.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᴴ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<C64>,
}

impl Cholesky {
    pub fn factor(a: &ComplexMatrix) -> Result<Self, NumericsError> {
        Self::factor_with(a, Tolerances::DEFAULT.pivot_rel)
    }

    pub fn factor_with(a: &ComplexMatrix, pivot_rel: f64) -> Result<Self, NumericsError> {
        if !a.is_square() {
            return Err(NumericsError::DimensionMismatch {
                expected: "square matrix".into(),
                got: format!("{}x{}", a.rows(), a.cols()),
            });
        }
        let n = a.rows();
        let max_diag = (0..n).map(|i| a[(i, i)].re.abs()).fold(0.0, f64::max);
        let floor = pivot_rel * max_diag;
        let mut l = vec![C64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > floor) || d <= 0.0 {
                return Err(NumericsError::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = C64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [C64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        // L z = b
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i].re;
        }
        // Lᴴ x = z
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i].conj() * b[k];
            }
            b[i] = s / self.l[i * n + i].re;
        }
    }

    pub fn solve_vec(&self, b: &[C64]) -> ComplexVector {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        ComplexVector(x)
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.n)
            .map(|i| 2.0 * self.l[i * self.n + i].re.ln())
            .sum()
    }
}

/// Solves `A X = B` for Hermitian positive-definite `A`.
pub fn hermitian_solve(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
) -> Result<ComplexMatrix, NumericsError> {
    if a.rows() != b.rows() {
        return Err(NumericsError::DimensionMismatch {
            expected: format!("{} rows", a.rows()),
            got: format!("{} rows", b.rows()),
        });
    }
    let chol = Cholesky::factor(a)?;
    let n = a.rows();
    let mut x = ComplexMatrix::zeros(n, b.cols());
    let mut col = vec![C64::new(0.0, 0.0); n];
    for j in 0..b.cols() {
        for i in 0..n {
            col[i] = b[(i, j)];
        }
        chol.solve_in_place(&mut col);
        for i in 0..n {
            x[(i, j)] = col[i];
        }
    }
    Ok(x)
}

/// Result of power iteration: Rayleigh quotient and unit eigenvector estimate.
#[derive(Debug, Clone)]
pub struct DominantEigen {
    pub value: f64,
    pub vector: ComplexVector,
    pub iterations: usize,
}

/// Power iteration on a Hermitian PSD matrix, seeded with the normalized
/// all-ones vector.
pub fn power_iteration(
    a: &ComplexMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<DominantEigen, NumericsError> {
    match power_iterate(a, tol, max_iter)? {
        (eig, true) => Ok(eig),
        (_, false) => Err(NumericsError::NoConvergence {
            iterations: max_iter,
        }),
    }
}

/// Like [`power_iteration`] but returns the last iterate together with a
/// convergence flag instead of failing.
pub(crate) fn power_iterate(
    a: &ComplexMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<(DominantEigen, bool), NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::DimensionMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Ok((
            DominantEigen {
                value: 0.0,
                vector: ComplexVector::zeros(0),
                iterations: 0,
            },
            true,
        ));
    }
    let mut x = ComplexVector(vec![C64::new(1.0 / (n as f64).sqrt(), 0.0); n]);
    let mut rho = 0.0_f64;
    for it in 1..=max_iter {
        let y = a.mul_vec(&x);
        let rho_new = x.dot(&y).re;
        let ny = y.norm();
        if ny == 0.0 {
            // x lies in the null space; for PSD input and an all-ones seed this
            // only happens for the zero matrix (or a measure-zero seed choice).
            return Ok((
                DominantEigen {
                    value: 0.0,
                    vector: x,
                    iterations: it,
                },
                true,
            ));
        }
        x = y.scaled(1.0 / ny);
        if (rho_new - rho).abs() <= tol * rho_new.abs() {
            let y = a.mul_vec(&x);
            return Ok((
                DominantEigen {
                    value: x.dot(&y).re,
                    vector: x,
                    iterations: it,
                },
                true,
            ));
        }
        rho = rho_new;
    }
    let y = a.mul_vec(&x);
    Ok((
        DominantEigen {
            value: x.dot(&y).re,
            vector: x,
            iterations: max_iter,
        },
        false,
    ))
}

/// Largest eigenvalue of a Hermitian PSD matrix, to relative accuracy `tol`.
pub fn dominant_eigenvalue(a: &ComplexMatrix, tol: f64) -> Result<f64, NumericsError> {
    // Rayleigh-quotient error is quadratic in the eigenvector error, so the
    // stopping rule on successive quotients is applied at tol².
    let stop = (tol * tol).max(16.0 * f64::EPSILON);
    power_iteration(a, stop, Tolerances::DEFAULT.power_max_iter).map(|e| e.value)
}

pub fn frobenius_norm(a: &ComplexMatrix) -> f64 {
    a.as_slice()
        .iter()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Real symmetric matrix `[[Re A, −Im A], [Im A, Re A]]` of a Hermitian `A`.
///
/// For `v = r + i s`, `vᴴ A v = [r; s]ᵀ E [r; s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSymmetricEmbedding {
    dim: usize,
    data: Vec<f64>,
}

impl RealSymmetricEmbedding {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// `xᵀ E x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let mut s = 0.0;
        for i in 0..self.dim {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            s += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

pub fn real_embed(a: &ComplexMatrix) -> Result<RealSymmetricEmbedding, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::DimensionMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    let defect = a.hermitian_defect();
    if defect > Tolerances::DEFAULT.hermitian_rel * a.frobenius_norm() {
        return Err(NumericsError::NotHermitian { asymmetry: defect });
    }
    let n = a.rows();
    let m = 2 * n;
    let mut data = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            let z = a[(i, j)];
            data[i * m + j] = z.re;
            data[i * m + n + j] = -z.im;
            data[(n + i) * m + j] = z.im;
            data[(n + i) * m + n + j] = z.re;
        }
    }
    Ok(RealSymmetricEmbedding { dim: m, data })
}
