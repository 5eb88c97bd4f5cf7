//! Interference-blind baselines: linear MMSE, orthogonal matching pursuit and
//! EM sparse Bayesian learning. All three model `n + ε` as white noise.

use std::fmt;
use std::str::FromStr;

use faer::linalg::solvers::Solve;
use faer::Side;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::score::GAMMA_FLOOR;
use crate::signal::{ComplexVector, MeasurementModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    Mmse,
    Omp,
    Sbl,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::Mmse => "mmse",
            BaselineMethod::Omp => "omp",
            BaselineMethod::Sbl => "sbl",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mmse" => Ok(BaselineMethod::Mmse),
            "omp" => Ok(BaselineMethod::Omp),
            "sbl" => Ok(BaselineMethod::Sbl),
            other => Err(Error::Config(format!("unknown baseline '{other}' (expected mmse, omp or sbl)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub h_hat: ComplexVector,
    pub method: BaselineMethod,
    pub iterations: usize,
    pub converged: bool,
    /// SBL only: log-evidence after each EM iteration.
    pub evidence_trace: Vec<f64>,
    /// SBL only: final prior variances.
    pub gamma: Option<Vec<f64>>,
    /// SBL only: final noise variance.
    pub noise_var: Option<f64>,
}

impl BaselineResult {
    fn simple(h_hat: Vec<Complex64>, method: BaselineMethod, iterations: usize, converged: bool) -> Result<Self> {
        Ok(Self {
            h_hat: ComplexVector::new(h_hat)?,
            method,
            iterations,
            converged,
            evidence_trace: Vec::new(),
            gamma: None,
            noise_var: None,
        })
    }
}

/// `p Aᴴ (p A Aᴴ + σ² I)⁻¹ y`.
pub fn mmse_estimate(model: &MeasurementModel, prior_var: f64, noise_var: f64) -> Result<BaselineResult> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::Domain(format!("MMSE noise variance must be > 0, got {noise_var}")));
    }
    if !(prior_var.is_finite() && prior_var >= 0.0) {
        return Err(Error::Domain(format!("MMSE prior variance must be >= 0, got {prior_var}")));
    }
    let a = model.a.dense();
    let m = model.measurements();
    let mut c = linalg::mul_by_adjoint(a, a);
    for j in 0..m {
        for i in 0..m {
            c[(i, j)] *= prior_var;
        }
        c[(j, j)] += noise_var;
    }
    let s = linalg::cholesky_solve(c.as_ref(), linalg::from_column(model.y.as_slice()).as_ref())?;
    let h = linalg::mul_adjoint(a, s.as_ref());
    BaselineResult::simple((0..model.taps()).map(|l| h[(l, 0)] * prior_var).collect(), BaselineMethod::Mmse, 1, true)
}

/// Least-squares coefficients on `support`, or `None` if the Gram matrix is
/// numerically singular.
fn refit(a: faer::MatRef<'_, Complex64>, y: &[Complex64], support: &[usize]) -> Option<Vec<Complex64>> {
    let k = support.len();
    let sub = CMat::from_fn(a.nrows(), k, |i, j| a[(i, support[j])]);
    let gram = linalg::mul_adjoint(sub.as_ref(), sub.as_ref());
    let rhs = linalg::mul_adjoint(sub.as_ref(), linalg::from_column(y).as_ref());
    let llt = gram.llt(Side::Lower).ok()?;
    // reject pivots that lost almost all of their column energy
    let l = llt.L();
    for j in 0..k {
        if l[(j, j)].re * l[(j, j)].re <= 1e-10 * gram[(j, j)].re {
            return None;
        }
    }
    let x = llt.solve(rhs);
    let out: Vec<Complex64> = (0..k).map(|i| x[(i, 0)]).collect();
    out.iter().all(|z| z.re.is_finite() && z.im.is_finite()).then_some(out)
}

/// Greedy OMP with a least-squares refit after each selection. Ties go to the
/// lowest column index.
pub fn omp_estimate(model: &MeasurementModel, sparsity: usize) -> Result<BaselineResult> {
    let (m, l) = (model.measurements(), model.taps());
    if sparsity == 0 || sparsity > m.min(l) {
        return Err(Error::Domain(format!("OMP sparsity must be in 1..={}, got {sparsity}", m.min(l))));
    }
    let a = model.a.dense();
    let y = model.y.as_slice();
    let y_norm = model.y.norm_sqr();
    let mut support: Vec<usize> = Vec::new();
    let mut excluded = vec![false; l];
    let mut coef: Vec<Complex64> = Vec::new();
    let mut residual = y.to_vec();
    let mut converged = true;
    let mut iterations = 0;
    while support.len() < sparsity {
        let r2: f64 = residual.iter().map(|z| z.norm_sqr()).sum();
        if r2 <= 1e-24 * y_norm.max(f64::MIN_POSITIVE) {
            break;
        }
        let corr = linalg::mul_adjoint(a, linalg::from_column(&residual).as_ref());
        let mut best: Option<(usize, f64)> = None;
        for j in 0..l {
            if excluded[j] {
                continue;
            }
            let v = corr[(j, 0)].norm_sqr();
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        let Some((pick, _)) = best else { break };
        iterations += 1;
        excluded[pick] = true;
        support.push(pick);
        match refit(a, y, &support) {
            Some(c) => coef = c,
            None => {
                log::debug!("OMP: atom {pick} makes the support rank-deficient; dropped");
                support.pop();
                converged = false;
                continue;
            }
        }
        residual = y.to_vec();
        for (&j, c) in support.iter().zip(&coef) {
            for (i, r) in residual.iter_mut().enumerate() {
                *r -= a[(i, j)] * c;
            }
        }
    }
    let mut h = vec![Complex64::new(0.0, 0.0); l];
    for (&j, c) in support.iter().zip(&coef) {
        h[j] = *c;
    }
    BaselineResult::simple(h, BaselineMethod::Omp, iterations, converged)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SblOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Re-estimate the noise variance each iteration.
    pub learn_noise: bool,
    /// Starting noise variance; `None` uses 10% of the per-entry power of `y`.
    pub initial_noise_var: Option<f64>,
}

impl Default for SblOptions {
    fn default() -> Self {
        Self { max_iters: 500, tol: 1e-6, learn_noise: true, initial_noise_var: None }
    }
}

/// Posterior moments and log-evidence of the SBL model at fixed `(γ, σ²)`.
struct SblPosterior {
    mean: Vec<Complex64>,
    var: Vec<f64>,
    log_evidence: f64,
}

/// Uses the `M × M` form `C = σ² I + A Γ Aᴴ`, which stays well conditioned as
/// entries of `γ` collapse to the floor.
fn sbl_posterior(a: faer::MatRef<'_, Complex64>, y: &[Complex64], gamma: &[f64], noise_var: f64) -> Result<SblPosterior> {
    let (m, l) = (a.nrows(), a.ncols());
    let ag = CMat::from_fn(m, l, |i, j| a[(i, j)] * gamma[j]);
    let mut c = linalg::mul_by_adjoint(ag.as_ref(), a);
    for i in 0..m {
        c[(i, i)] += noise_var;
    }
    let llt = c
        .llt(Side::Lower)
        .map_err(|e| Error::Numeric(format!("SBL evidence covariance is not positive definite: {e:?}")))?;
    let ycol = linalg::from_column(y);
    let ciy = llt.solve(ycol.as_ref());
    let cia = llt.solve(ag.as_ref());
    let mean_col = linalg::mul_adjoint(ag.as_ref(), ciy.as_ref());
    let mean: Vec<Complex64> = (0..l).map(|j| mean_col[(j, 0)]).collect();
    // Σ_ll = γ_l − γ_l² a_lᴴ C⁻¹ a_l
    let var: Vec<f64> = (0..l)
        .map(|j| {
            let q: f64 = (0..m).map(|i| (ag[(i, j)].conj() * cia[(i, j)]).re).sum();
            (gamma[j] - q).max(0.0)
        })
        .collect();
    let quad: f64 = (0..m).map(|i| (y[i].conj() * ciy[(i, 0)]).re).sum();
    let lmat = llt.L();
    let logdet: f64 = 2.0 * (0..m).map(|i| lmat[(i, i)].re.ln()).sum::<f64>();
    let log_evidence = -(quad + logdet + m as f64 * std::f64::consts::PI.ln());
    if !log_evidence.is_finite() || mean.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric("SBL posterior is not finite".into()));
    }
    Ok(SblPosterior { mean, var, log_evidence })
}

/// Classic EM-SBL: `γ_l ← Σ_ll + |μ_l|²`, with the noise variance re-estimated
/// from the residual. The returned estimate is the highest-evidence iterate.
pub fn sbl_estimate(model: &MeasurementModel, opts: &SblOptions) -> Result<BaselineResult> {
    if opts.max_iters == 0 {
        return Err(Error::Domain("SBL needs max_iters >= 1".into()));
    }
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::Domain(format!("SBL tolerance must be > 0, got {}", opts.tol)));
    }
    let (m, l) = (model.measurements(), model.taps());
    let a = model.a.dense();
    let y = model.y.as_slice();
    let power = model.y.norm_sqr() / m as f64;
    if power == 0.0 {
        return Ok(BaselineResult {
            gamma: Some(vec![GAMMA_FLOOR; l]),
            noise_var: Some(model.sigma_y2),
            ..BaselineResult::simple(vec![Complex64::new(0.0, 0.0); l], BaselineMethod::Sbl, 0, true)?
        });
    }
    let noise_floor = 1e-10 * power;
    let mut noise_var = opts.initial_noise_var.unwrap_or(0.1 * power).max(noise_floor);
    // ‖A h‖² ≈ M ‖h‖² for unit-modulus pilots
    let col_energy: f64 = (0..l).map(|j| (0..m).map(|i| a[(i, j)].norm_sqr()).sum::<f64>()).sum::<f64>() / l as f64;
    let mut gamma = vec![(power * m as f64 / (col_energy * l as f64)).max(GAMMA_FLOOR); l];
    let mut post = sbl_posterior(a, y, &gamma, noise_var)?;
    let mut trace = vec![post.log_evidence];
    let mut best = (post.log_evidence, post.mean.clone(), gamma.clone(), noise_var);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let new_gamma: Vec<f64> =
            post.mean.iter().zip(&post.var).map(|(mu, v)| (v + mu.norm_sqr()).max(GAMMA_FLOOR)).collect();
        if opts.learn_noise {
            // E‖y − A h‖² under the posterior
            let mut r2 = 0.0;
            for i in 0..m {
                let mut ah = Complex64::new(0.0, 0.0);
                for j in 0..l {
                    ah += a[(i, j)] * post.mean[j];
                }
                r2 += (y[i] - ah).norm_sqr();
            }
            let tr: f64 = (0..l).map(|j| post.var[j] * (0..m).map(|i| a[(i, j)].norm_sqr()).sum::<f64>()).sum();
            noise_var = ((r2 + tr) / m as f64).max(noise_floor);
        }
        let num: f64 = new_gamma.iter().zip(&gamma).map(|(n, o)| (n - o) * (n - o)).sum();
        let den: f64 = gamma.iter().map(|g| g * g).sum();
        gamma = new_gamma;
        post = sbl_posterior(a, y, &gamma, noise_var)?;
        trace.push(post.log_evidence);
        if post.log_evidence >= best.0 {
            best = (post.log_evidence, post.mean.clone(), gamma.clone(), noise_var);
        }
        if (num / den).sqrt() < opts.tol {
            converged = true;
            break;
        }
    }
    let (_, mean, gamma, noise_var) = if converged { (post.log_evidence, post.mean, gamma, noise_var) } else { best };
    Ok(BaselineResult {
        h_hat: ComplexVector::new(mean)?,
        method: BaselineMethod::Sbl,
        iterations,
        converged,
        evidence_trace: trace,
        gamma: Some(gamma),
        noise_var: Some(noise_var),
    })
}
