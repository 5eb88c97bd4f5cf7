//! Thin helpers over `faer` for the dense complex algebra used by the sampler.
//!
//! Ensembles are stored column-wise: an `L × K` matrix holds K channel
//! samples, one per column. All products run sequentially so results are
//! bit-identical regardless of the thread pool.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMat = Mat<Complex64>;

const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// `a · b`
pub fn mul(a: MatRef<'_, Complex64>, b: MatRef<'_, Complex64>) -> CMat {
    let mut out = CMat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, ONE, Par::Seq);
    out
}

/// `aᴴ · b`
pub fn mul_adjoint(a: MatRef<'_, Complex64>, b: MatRef<'_, Complex64>) -> CMat {
    let mut out = CMat::zeros(a.ncols(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a.adjoint(), b, ONE, Par::Seq);
    out
}

/// `a · bᴴ`
pub fn mul_by_adjoint(a: MatRef<'_, Complex64>, b: MatRef<'_, Complex64>) -> CMat {
    let mut out = CMat::zeros(a.nrows(), b.nrows());
    matmul(out.as_mut(), Accum::Replace, a, b.adjoint(), ONE, Par::Seq);
    out
}

/// `u · diag(d) · vᴴ`, used to rebuild spectral functions of Hermitian matrices.
pub fn scaled_outer(u: MatRef<'_, Complex64>, d: &[f64], v: MatRef<'_, Complex64>) -> CMat {
    debug_assert_eq!(u.ncols(), d.len());
    let scaled = CMat::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * d[j]);
    let mut out = CMat::zeros(u.nrows(), v.nrows());
    matmul(out.as_mut(), Accum::Replace, scaled.as_ref(), v.adjoint(), ONE, Par::Seq);
    out
}

pub fn column(m: MatRef<'_, Complex64>, j: usize) -> Vec<Complex64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

pub fn from_column(v: &[Complex64]) -> CMat {
    CMat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn from_columns(cols: &[Vec<Complex64>]) -> CMat {
    let rows = cols.first().map_or(0, Vec::len);
    CMat::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Mean over columns.
pub fn column_mean(m: MatRef<'_, Complex64>) -> Vec<Complex64> {
    let k = m.ncols() as f64;
    let mut acc = vec![Complex64::new(0.0, 0.0); m.nrows()];
    for j in 0..m.ncols() {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += m[(i, j)];
        }
    }
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

/// `dst[:, j] += v` for every column.
pub fn add_to_columns(dst: &mut CMat, v: &[Complex64]) {
    for j in 0..dst.ncols() {
        for (x, b) in dst.col_as_slice_mut(j).iter_mut().zip(v) {
            *x += *b;
        }
    }
}

pub fn frobenius_sqr(m: MatRef<'_, Complex64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            s += m[(i, j)].norm_sqr();
        }
    }
    s
}

pub fn all_finite(m: MatRef<'_, Complex64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].re.is_finite() && m[(i, j)].im.is_finite()))
}

/// Draw from CN(0, variance·I): real and imaginary parts each N(0, variance/2).
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Matrix of i.i.d. CN(0, variance) entries, filled column by column.
pub fn complex_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, variance: f64) -> CMat {
    let mut m = CMat::zeros(rows, cols);
    for j in 0..cols {
        for x in m.col_as_slice_mut(j) {
            *x = complex_normal(rng, variance);
        }
    }
    m
}

/// Largest absolute deviation from Hermitian symmetry, relative to the largest entry.
pub fn hermitian_defect(m: MatRef<'_, Complex64>) -> f64 {
    let mut scale = 0.0f64;
    let mut defect = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            scale = scale.max(m[(i, j)].norm());
            defect = defect.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        defect / scale
    }
}

/// Eigendecomposition `U diag(λ) Uᴴ` of a Hermitian matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub vectors: CMat,
    pub values: Vec<f64>,
}

impl HermitianEigen {
    pub fn new(m: MatRef<'_, Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidDimensions(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let evd = m
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Numeric(format!("Hermitian eigendecomposition failed: {e:?}")))?;
        let s = evd.S();
        let values = s.column_vector().iter().map(|x| x.re).collect();
        Ok(Self { vectors: evd.U().to_owned(), values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U diag(f(λ)) Uᴴ`
    pub fn map(&self, f: impl Fn(f64) -> f64) -> CMat {
        let d: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        scaled_outer(self.vectors.as_ref(), &d, self.vectors.as_ref())
    }
}

/// Solve `m x = b` for Hermitian positive definite `m` by Cholesky.
pub fn cholesky_solve(m: MatRef<'_, Complex64>, b: MatRef<'_, Complex64>) -> Result<CMat> {
    use faer::linalg::solvers::Solve;
    let llt = m
        .llt(Side::Lower)
        .map_err(|e| Error::Numeric(format!("Cholesky factorization failed: {e:?}")))?;
    Ok(llt.solve(b))
}
