//! Prior score providers `∇_{x_t*} log p(x_t)`.
//!
//! Scores use the conjugate Wirtinger convention: for `p = CN(0, Σ)` the
//! score is `-Σ⁻¹ x`, with no factor ½. Batched methods take one sample per
//! column.

mod network;

use faer::MatRef;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, HermitianEigen};
use crate::sde::DiffusionTime;
use crate::signal::{ComplexVector, GaussianProcess};

pub use network::{
    LayerKind, LayerSpec, LearnedScore, ScoreNetwork, UnetConfig, VjpMode, DMSC_MAGIC, DMSC_VERSION, TIME_EMBED_MAX_PERIOD,
    TIME_EMBED_SCALE,
};

/// Smallest per-tap prior variance the channel prior will hold.
pub const GAMMA_FLOOR: f64 = 1e-6;

/// A prior whose perturbed score can be evaluated at any diffusion time.
pub trait ScoreProvider: Send + Sync {
    /// Perturbed-prior score for every column of `x`.
    fn score_batch(&self, x: MatRef<'_, Complex64>, time: DiffusionTime) -> Result<CMat>;

    /// Tweedie estimate `(x + 2(1 - α²) s(x)) / α` for every column.
    fn denoise_batch(&self, x: MatRef<'_, Complex64>, time: DiffusionTime) -> Result<CMat> {
        let s = self.score_batch(x, time)?;
        Ok(denoise_from_score(x, s.as_ref(), time))
    }

    /// `(∂x̂/∂x)ᴴ v` per column, `x̂` the Tweedie estimate through this provider.
    fn tweedie_vjp_batch(
        &self,
        v: MatRef<'_, Complex64>,
        x: MatRef<'_, Complex64>,
        time: DiffusionTime,
    ) -> Result<CMat> {
        finite_difference_vjp(self, v, x, time)
    }
}

pub(crate) fn denoise_from_score(x: MatRef<'_, Complex64>, s: MatRef<'_, Complex64>, time: DiffusionTime) -> CMat {
    let var = time.kernel_var();
    let a = time.safe_alpha();
    CMat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] + s[(i, j)] * var) / a)
}

fn check_shapes(v: MatRef<'_, Complex64>, x: MatRef<'_, Complex64>) -> Result<()> {
    if v.nrows() != x.nrows() || v.ncols() != x.ncols() {
        return Err(Error::InvalidDimensions(format!(
            "direction is {}x{} but state is {}x{}",
            v.nrows(),
            v.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Central finite difference of the Tweedie map along each column of `v`,
/// taken in the real `2M`-dimensional representation with step
/// `1e-3 (1 + ‖x‖/√M)`. Equals the adjoint product whenever the Jacobian is
/// symmetric, which holds for any exact score field.
pub fn finite_difference_vjp<P: ScoreProvider + ?Sized>(
    provider: &P,
    v: MatRef<'_, Complex64>,
    x: MatRef<'_, Complex64>,
    time: DiffusionTime,
) -> Result<CMat> {
    check_shapes(v, x)?;
    let (m, k) = (x.nrows(), x.ncols());
    let mut plus = x.to_owned();
    let mut minus = x.to_owned();
    let mut steps = vec![0.0; k];
    let mut norms = vec![0.0; k];
    for j in 0..k {
        let vn = (0..m).map(|i| v[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        let xn = (0..m).map(|i| x[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        let eps = 1e-3 * (1.0 + xn / (m as f64).sqrt());
        norms[j] = vn;
        steps[j] = eps;
        if vn == 0.0 {
            continue;
        }
        for i in 0..m {
            let d = v[(i, j)] * (eps / vn);
            plus[(i, j)] += d;
            minus[(i, j)] -= d;
        }
    }
    let fp = provider.denoise_batch(plus.as_ref(), time)?;
    let fm = provider.denoise_batch(minus.as_ref(), time)?;
    Ok(CMat::from_fn(m, k, |i, j| {
        if norms[j] == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            (fp[(i, j)] - fm[(i, j)]) * (norms[j] / (2.0 * steps[j]))
        }
    }))
}

/// Single-vector form of [`ScoreProvider::tweedie_vjp_batch`].
pub fn score_vjp<P: ScoreProvider + ?Sized>(
    v: &[Complex64],
    x_t: &[Complex64],
    time: DiffusionTime,
    provider: &P,
) -> Result<ComplexVector> {
    if v.len() != x_t.len() {
        return Err(Error::InvalidDimensions(format!("direction length {} != state length {}", v.len(), x_t.len())));
    }
    let out = provider.tweedie_vjp_batch(linalg::from_column(v).as_ref(), linalg::from_column(x_t).as_ref(), time)?;
    ComplexVector::new(linalg::column(out.as_ref(), 0))
}

/// Per-tap channel prior variances `γ`, clamped at [`GAMMA_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPriorState {
    gamma: Vec<f64>,
}

impl ChannelPriorState {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::InvalidDimensions("γ must be non-empty".into()));
        }
        if gamma.iter().any(|g| g.is_nan() || *g == f64::INFINITY) {
            return Err(Error::Numeric("γ must be finite".into()));
        }
        Ok(Self { gamma: gamma.into_iter().map(|g| g.max(GAMMA_FLOOR)).collect() })
    }

    pub fn constant(len: usize, rho: f64) -> Result<Self> {
        Self::new(vec![rho; len])
    }

    /// Clamp every entry to at most `max` (never below the floor).
    pub fn capped(mut self, max: f64) -> Self {
        let max = max.max(GAMMA_FLOOR);
        self.gamma.iter_mut().for_each(|g| *g = g.min(max));
        self
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// Diagonal of `Σ_{h,t} = 2(1 - α²) I + α² diag(γ)`.
    pub fn perturbed_variances(&self, time: DiffusionTime) -> Vec<f64> {
        let (a2, r2) = (time.alpha_sq(), time.kernel_var());
        self.gamma.iter().map(|g| r2 + a2 * g).collect()
    }

    pub fn min(&self) -> f64 {
        self.gamma.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn as_provider(&self) -> DiagonalGaussianPrior<'_> {
        DiagonalGaussianPrior { state: self }
    }
}

/// `-Σ_{h,t}⁻¹ h_t` elementwise.
pub fn channel_prior_score(h_t: &[Complex64], time: DiffusionTime, gamma: &ChannelPriorState) -> Result<ComplexVector> {
    if h_t.len() != gamma.len() {
        return Err(Error::InvalidDimensions(format!("h_t length {} != γ length {}", h_t.len(), gamma.len())));
    }
    let var = gamma.perturbed_variances(time);
    ComplexVector::new(h_t.iter().zip(&var).map(|(h, s)| -h / s).collect())
}

/// Score provider view of the diagonal channel prior.
#[derive(Debug, Clone, Copy)]
pub struct DiagonalGaussianPrior<'a> {
    state: &'a ChannelPriorState,
}

impl DiagonalGaussianPrior<'_> {
    /// Elementwise Tweedie Jacobian `(1 - 2(1 - α²)/Σ_{h,t}) / α`.
    pub fn tweedie_gain(&self, time: DiffusionTime) -> Vec<f64> {
        let r2 = time.kernel_var();
        let a = time.safe_alpha();
        self.state.perturbed_variances(time).iter().map(|s| (1.0 - r2 / s) / a).collect()
    }

    fn check_rows(&self, x: MatRef<'_, Complex64>) -> Result<()> {
        if x.nrows() != self.state.len() {
            return Err(Error::InvalidDimensions(format!("state has {} rows, γ has {}", x.nrows(), self.state.len())));
        }
        Ok(())
    }
}

impl ScoreProvider for DiagonalGaussianPrior<'_> {
    fn score_batch(&self, x: MatRef<'_, Complex64>, time: DiffusionTime) -> Result<CMat> {
        self.check_rows(x)?;
        let var = self.state.perturbed_variances(time);
        Ok(CMat::from_fn(x.nrows(), x.ncols(), |i, j| -x[(i, j)] / var[i]))
    }

    fn denoise_batch(&self, x: MatRef<'_, Complex64>, time: DiffusionTime) -> Result<CMat> {
        self.check_rows(x)?;
        let g = self.tweedie_gain(time);
        Ok(CMat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * g[i]))
    }

    fn tweedie_vjp_batch(
        &self,
        v: MatRef<'_, Complex64>,
        x: MatRef<'_, Complex64>,
        time: DiffusionTime,
    ) -> Result<CMat> {
        check_shapes(v, x)?;
        self.check_rows(x)?;
        let g = self.tweedie_gain(time);
        Ok(CMat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * g[i]))
    }
}

/// Analytic score of Gaussian-process interference `CN(0, Σ_n)`.
#[derive(Debug, Clone)]
pub struct GaussianInterferencePrior {
    eigen: HermitianEigen,
}

impl GaussianInterferencePrior {
    pub fn new(covariance: CMat) -> Result<Self> {
        Ok(Self::from_process(&GaussianProcess::new(covariance)?))
    }

    pub fn from_process(gp: &GaussianProcess) -> Self {
        Self { eigen: gp.eigen().clone() }
    }

    pub fn dim(&self) -> usize {
        self.eigen.dim()
    }

    /// Prior of the interference after multiplying it by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut eigen = self.eigen.clone();
        let f2 = factor * factor;
        eigen.values.iter_mut().for_each(|l| *l *= f2);
        Self { eigen }
    }

    pub fn covariance(&self) -> CMat {
        self.eigen.map(|l| l)
    }

    /// `U diag(f(λ)) Uᴴ X` without forming the matrix.
    fn spectral_apply(&self, x: MatRef<'_, Complex64>, f: impl Fn(f64) -> f64) -> Result<CMat> {
        if x.nrows() != self.dim() {
            return Err(Error::InvalidDimensions(format!("state has {} rows, covariance is {}", x.nrows(), self.dim())));
        }
        let u = self.eigen.vectors.as_ref();
        let mut rotated = linalg::mul_adjoint(u, x);
        let d: Vec<f64> = self.eigen.values.iter().map(|&l| f(l)).collect();
        for j in 0..rotated.ncols() {
            for (z, s) in rotated.col_as_slice_mut(j).iter_mut().zip(&d) {
                *z *= *s;
            }
        }
        Ok(linalg::mul(u, rotated.as_ref()))
    }
}

impl ScoreProvider for GaussianInterferencePrior {
    fn score_batch(&self, x: MatRef<'_, Complex64>, time: DiffusionTime) -> Result<CMat> {
        let (a2, r2) = (time.alpha_sq(), time.kernel_var());
        self.spectral_apply(x, |l| -1.0 / (a2 * l + r2))
    }

    fn tweedie_vjp_batch(
        &self,
        v: MatRef<'_, Complex64>,
        x: MatRef<'_, Complex64>,
        time: DiffusionTime,
    ) -> Result<CMat> {
        check_shapes(v, x)?;
        let (a2, r2, a) = (time.alpha_sq(), time.kernel_var(), time.safe_alpha());
        self.spectral_apply(v, |l| (1.0 - r2 / (a2 * l + r2)) / a)
    }
}

/// Single-vector form of the Gaussian interference score.
pub fn gaussian_interference_score(
    n_t: &[Complex64],
    time: DiffusionTime,
    prior: &GaussianInterferencePrior,
) -> Result<ComplexVector> {
    let s = prior.score_batch(linalg::from_column(n_t).as_ref(), time)?;
    ComplexVector::new(linalg::column(s.as_ref(), 0))
}

/// Flat prior: zero score everywhere, so the Tweedie map is `x / α`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl ScoreProvider for ZeroScore {
    fn score_batch(&self, x: MatRef<'_, Complex64>, _time: DiffusionTime) -> Result<CMat> {
        Ok(CMat::zeros(x.nrows(), x.ncols()))
    }

    fn tweedie_vjp_batch(
        &self,
        v: MatRef<'_, Complex64>,
        x: MatRef<'_, Complex64>,
        time: DiffusionTime,
    ) -> Result<CMat> {
        check_shapes(v, x)?;
        let a = time.safe_alpha();
        Ok(CMat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / a))
    }
}
