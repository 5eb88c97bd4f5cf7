//! Perturbed-likelihood guidance (DMPS and ΠGDM) and the K-sample posterior
//! score assembly.
//!
//! Both approximations give a Gaussian likelihood with covariance
//! `Σ_{y,t} = c_t (AAᴴ + I) + σ_y² I`, where `c_t = r_t²/α²` for DMPS and
//! `c_t = r_t²` for ΠGDM, `r_t² = 2(1 - α²)`. All of them share the
//! eigenvectors of `AAᴴ`, so one eigendecomposition per run gives
//! `Σ_{y,t}⁻¹` at every step without refactorizing.
//!
//! Ensembles are `L × K` and `M × K` matrices with one sample per column.

use faer::MatRef;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, HermitianEigen};
use crate::score::{ChannelPriorState, ScoreProvider};
use crate::sde::DiffusionTime;
use crate::signal::{ComplexVector, MeasurementModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMethod {
    Dmps,
    Pgdm,
}

impl std::str::FromStr for GuidanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dmps" => Ok(Self::Dmps),
            "pgdm" | "πgdm" => Ok(Self::Pgdm),
            _ => Err(Error::Config(format!("unknown guidance method '{s}' (expected dmps or pgdm)"))),
        }
    }
}

impl std::fmt::Display for GuidanceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dmps => "dmps",
            Self::Pgdm => "pgdm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub method: GuidanceMethod,
    /// Weight of the channel prior score.
    pub mu: f64,
    /// Weight of the interference prior score.
    pub kappa: f64,
    /// Ensemble size.
    pub k: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { method: GuidanceMethod::Dmps, mu: 1.0, kappa: 1.0, k: 256 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("ensemble size K must be at least 1".into()));
        }
        for (name, v) in [("mu", self.mu), ("kappa", self.kappa)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("guidance.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Run-level factorization shared by every step.
#[derive(Debug, Clone)]
pub struct LikelihoodCache {
    a: CMat,
    y: Vec<Complex64>,
    sigma_y2: f64,
    /// Eigenpairs of `AAᴴ`.
    eigen: HermitianEigen,
    /// `Aᴴ U`
    w: CMat,
}

impl LikelihoodCache {
    pub fn new(model: &MeasurementModel) -> Result<Self> {
        let a = model.a.dense().to_owned();
        let mut eigen = HermitianEigen::new(model.a.gram().as_ref())?;
        eigen.values.iter_mut().for_each(|l| *l = l.max(0.0));
        let w = linalg::mul_adjoint(a.as_ref(), eigen.vectors.as_ref());
        Ok(Self { a, y: model.y.as_slice().to_vec(), sigma_y2: model.sigma_y2, eigen, w })
    }

    pub fn a(&self) -> MatRef<'_, Complex64> {
        self.a.as_ref()
    }

    pub fn y(&self) -> &[Complex64] {
        &self.y
    }

    pub fn taps(&self) -> usize {
        self.a.ncols()
    }

    pub fn measurements(&self) -> usize {
        self.a.nrows()
    }

    pub fn sigma_y2(&self) -> f64 {
        self.sigma_y2
    }

    /// Scale `c_t` in front of `AAᴴ + I`.
    pub fn covariance_scale(method: GuidanceMethod, time: DiffusionTime) -> f64 {
        match method {
            GuidanceMethod::Dmps => time.kernel_var() / time.safe_alpha().powi(2),
            GuidanceMethod::Pgdm => time.kernel_var(),
        }
    }

    /// `Σ_{y,t}` built entry by entry from its definition.
    pub fn sigma_y(&self, method: GuidanceMethod, time: DiffusionTime) -> CMat {
        let c = Self::covariance_scale(method, time);
        let aa = linalg::mul_by_adjoint(self.a.as_ref(), self.a.as_ref());
        let m = self.measurements();
        CMat::from_fn(m, m, |i, j| {
            let diag = if i == j { c + self.sigma_y2 } else { 0.0 };
            aa[(i, j)] * c + Complex64::new(diag, 0.0)
        })
    }

    /// Per-step inverse covariance and the projected Gram `AᴴΣ_{y,t}⁻¹A`.
    pub fn step(&self, method: GuidanceMethod, time: DiffusionTime) -> StepCache {
        let c = Self::covariance_scale(method, time);
        let mut d: Vec<f64> = self.eigen.values.iter().map(|l| c * (l + 1.0) + self.sigma_y2).collect();
        let floor = 1e-10 * d.iter().sum::<f64>() / d.len() as f64;
        d.iter_mut().for_each(|v| *v = v.max(floor).max(f64::MIN_POSITIVE));
        let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
        let u = self.eigen.vectors.as_ref();
        StepCache {
            method,
            time,
            sigma_inv: linalg::scaled_outer(u, &inv, u),
            gram: linalg::scaled_outer(self.w.as_ref(), &inv, self.w.as_ref()),
        }
    }
}

/// Quantities fixed for one diffusion time.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub method: GuidanceMethod,
    pub time: DiffusionTime,
    /// `Σ_{y,t}⁻¹`
    pub sigma_inv: CMat,
    /// `Aᴴ Σ_{y,t}⁻¹ A`
    pub gram: CMat,
}

impl StepCache {
    fn sigma_inv_apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        linalg::column(linalg::mul(self.sigma_inv.as_ref(), linalg::from_column(v).as_ref()).as_ref(), 0)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidDimensions(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

fn sub(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn adjoint_apply(a: MatRef<'_, Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    linalg::column(linalg::mul_adjoint(a, linalg::from_column(v).as_ref()).as_ref(), 0)
}

fn apply(a: MatRef<'_, Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    linalg::column(linalg::mul(a, linalg::from_column(v).as_ref()).as_ref(), 0)
}

/// Single-sample DMPS likelihood scores
/// `((1/α) Aᴴ Σ⁻¹ r, (1/α) Σ⁻¹ r)` with `r = y - (A h_t + n_t)/α`.
pub fn dmps_likelihood_scores(
    h_t: &[Complex64],
    n_t: &[Complex64],
    cache: &LikelihoodCache,
    time: DiffusionTime,
) -> Result<(ComplexVector, ComplexVector)> {
    check_len("h_t", h_t.len(), cache.taps())?;
    check_len("n_t", n_t.len(), cache.measurements())?;
    let step = cache.step(GuidanceMethod::Dmps, time);
    let inv_a = 1.0 / time.safe_alpha();
    let ah = apply(cache.a(), h_t);
    let r: Vec<Complex64> = (0..cache.measurements()).map(|m| cache.y[m] - (ah[m] + n_t[m]) * inv_a).collect();
    let gn: Vec<Complex64> = step.sigma_inv_apply(&r).into_iter().map(|z| z * inv_a).collect();
    let gh = adjoint_apply(cache.a(), &gn);
    Ok((ComplexVector::new(gh)?, ComplexVector::new(gn)?))
}

/// Single-sample ΠGDM likelihood scores through the Tweedie estimates
/// `ĥ_t` (diagonal channel prior) and `n̂_t` (interference provider).
pub fn pgdm_likelihood_scores(
    h_t: &[Complex64],
    n_t: &[Complex64],
    cache: &LikelihoodCache,
    time: DiffusionTime,
    gamma: &ChannelPriorState,
    n_provider: &dyn ScoreProvider,
) -> Result<(ComplexVector, ComplexVector)> {
    check_len("h_t", h_t.len(), cache.taps())?;
    check_len("n_t", n_t.len(), cache.measurements())?;
    check_len("γ", gamma.len(), cache.taps())?;
    let step = cache.step(GuidanceMethod::Pgdm, time);
    let gain = gamma.as_provider().tweedie_gain(time);
    let h_hat: Vec<Complex64> = h_t.iter().zip(&gain).map(|(h, g)| h * g).collect();
    let n_col = linalg::from_column(n_t);
    let n_hat = linalg::column(n_provider.denoise_batch(n_col.as_ref(), time)?.as_ref(), 0);
    let ah = apply(cache.a(), &h_hat);
    let r: Vec<Complex64> = (0..cache.measurements()).map(|m| cache.y[m] - ah[m] - n_hat[m]).collect();
    let sr = step.sigma_inv_apply(&r);
    let gh: Vec<Complex64> = adjoint_apply(cache.a(), &sr).iter().zip(&gain).map(|(v, g)| v * g).collect();
    let gn = n_provider.tweedie_vjp_batch(linalg::from_column(&sr).as_ref(), n_col.as_ref(), time)?;
    Ok((ComplexVector::new(gh)?, ComplexVector::new(linalg::column(gn.as_ref(), 0))?))
}

/// Ensemble-mean channel term entering the interference branch:
/// the mean of `h_t` (DMPS) or of `ĥ_t` (ΠGDM).
pub fn channel_term(step: &StepCache, h: MatRef<'_, Complex64>, gamma: &ChannelPriorState) -> Vec<Complex64> {
    let mean = linalg::column_mean(h);
    match step.method {
        GuidanceMethod::Dmps => mean,
        GuidanceMethod::Pgdm => {
            let gain = gamma.as_provider().tweedie_gain(step.time);
            mean.iter().zip(&gain).map(|(m, g)| m * g).collect()
        }
    }
}

/// Ensemble-mean interference term entering the channel branch: the mean of
/// `n_t` (DMPS) or of `n̂_t` (ΠGDM). `n_score` is the provider score at `n`.
pub fn interference_term(step: &StepCache, n: MatRef<'_, Complex64>, n_score: MatRef<'_, Complex64>) -> Vec<Complex64> {
    match step.method {
        GuidanceMethod::Dmps => linalg::column_mean(n),
        GuidanceMethod::Pgdm => {
            let mean_n = linalg::column_mean(n);
            let mean_s = linalg::column_mean(n_score);
            let (r2, a) = (step.time.kernel_var(), step.time.safe_alpha());
            mean_n.iter().zip(&mean_s).map(|(x, s)| (x + s * r2) / a).collect()
        }
    }
}

/// Channel posterior scores `μ ∇ log p(h_t) + ∇_h log p(y | h_t, n̄)` for
/// every column of `h`.
pub fn h_posterior_scores(
    step: &StepCache,
    cache: &LikelihoodCache,
    cfg: &GuidanceConfig,
    h: MatRef<'_, Complex64>,
    gamma: &ChannelPriorState,
    n_term: &[Complex64],
) -> Result<CMat> {
    check_len("h rows", h.nrows(), cache.taps())?;
    check_len("γ", gamma.len(), cache.taps())?;
    check_len("interference term", n_term.len(), cache.measurements())?;
    let time = step.time;
    let (l, k) = (h.nrows(), h.ncols());
    let mut out = match step.method {
        GuidanceMethod::Dmps => {
            let a = 1.0 / time.safe_alpha();
            let r: Vec<Complex64> = cache.y.iter().zip(n_term).map(|(y, n)| y - n * a).collect();
            let b: Vec<Complex64> = adjoint_apply(cache.a(), &step.sigma_inv_apply(&r)).iter().map(|v| v * a).collect();
            let mut g = linalg::mul(step.gram.as_ref(), h);
            for j in 0..k {
                for (x, bb) in g.col_as_slice_mut(j).iter_mut().zip(&b) {
                    *x = bb - *x * (a * a);
                }
            }
            g
        }
        GuidanceMethod::Pgdm => {
            let gain = gamma.as_provider().tweedie_gain(time);
            let h_hat = CMat::from_fn(l, k, |i, j| h[(i, j)] * gain[i]);
            let r = sub(&cache.y, n_term);
            let b = adjoint_apply(cache.a(), &step.sigma_inv_apply(&r));
            let mut g = linalg::mul(step.gram.as_ref(), h_hat.as_ref());
            for j in 0..k {
                for (i, x) in g.col_as_slice_mut(j).iter_mut().enumerate() {
                    *x = (b[i] - *x) * gain[i];
                }
            }
            g
        }
    };
    if cfg.mu != 0.0 {
        let var = gamma.perturbed_variances(time);
        for j in 0..k {
            for (i, x) in out.col_as_slice_mut(j).iter_mut().enumerate() {
                *x -= h[(i, j)] * (cfg.mu / var[i]);
            }
        }
    }
    Ok(out)
}

/// Interference posterior scores `κ s_n(n_t) + ∇_n log p(y | h̄, n_t)` for
/// every column of `n`. `n_score` is the provider score at `n`.
pub fn n_posterior_scores(
    step: &StepCache,
    cache: &LikelihoodCache,
    cfg: &GuidanceConfig,
    provider: &dyn ScoreProvider,
    n: MatRef<'_, Complex64>,
    n_score: MatRef<'_, Complex64>,
    h_term: &[Complex64],
) -> Result<CMat> {
    check_len("n rows", n.nrows(), cache.measurements())?;
    check_len("channel term", h_term.len(), cache.taps())?;
    let time = step.time;
    let (m, k) = (n.nrows(), n.ncols());
    let ah = apply(cache.a(), h_term);
    let mut out = match step.method {
        GuidanceMethod::Dmps => {
            let a = 1.0 / time.safe_alpha();
            let r: Vec<Complex64> = cache.y.iter().zip(&ah).map(|(y, v)| y - v * a).collect();
            let c: Vec<Complex64> = step.sigma_inv_apply(&r).iter().map(|v| v * a).collect();
            let mut g = linalg::mul(step.sigma_inv.as_ref(), n);
            for j in 0..k {
                for (x, cc) in g.col_as_slice_mut(j).iter_mut().zip(&c) {
                    *x = cc - *x * (a * a);
                }
            }
            g
        }
        GuidanceMethod::Pgdm => {
            let (r2, a) = (time.kernel_var(), time.safe_alpha());
            let n_hat = CMat::from_fn(m, k, |i, j| (n[(i, j)] + n_score[(i, j)] * r2) / a);
            let c = step.sigma_inv_apply(&sub(&cache.y, &ah));
            let mut v = linalg::mul(step.sigma_inv.as_ref(), n_hat.as_ref());
            for j in 0..k {
                for (x, cc) in v.col_as_slice_mut(j).iter_mut().zip(&c) {
                    *x = cc - *x;
                }
            }
            provider.tweedie_vjp_batch(v.as_ref(), n, time)?
        }
    };
    if cfg.kappa != 0.0 {
        for j in 0..k {
            for (i, x) in out.col_as_slice_mut(j).iter_mut().enumerate() {
                *x += n_score[(i, j)] * cfg.kappa;
            }
        }
    }
    Ok(out)
}

/// Channel and interference posterior scores evaluated from the same state.
pub fn assemble_posterior_scores(
    step: &StepCache,
    cache: &LikelihoodCache,
    cfg: &GuidanceConfig,
    provider: &dyn ScoreProvider,
    h: MatRef<'_, Complex64>,
    n: MatRef<'_, Complex64>,
    gamma: &ChannelPriorState,
) -> Result<(CMat, CMat)> {
    if h.ncols() == 0 || h.ncols() != n.ncols() {
        return Err(Error::InvalidDimensions(format!(
            "ensemble needs K >= 1 matching columns, got {} and {}",
            h.ncols(),
            n.ncols()
        )));
    }
    let n_score = provider.score_batch(n, step.time)?;
    let n_term = interference_term(step, n, n_score.as_ref());
    let h_term = channel_term(step, h, gamma);
    let gh = h_posterior_scores(step, cache, cfg, h, gamma, &n_term)?;
    let gn = n_posterior_scores(step, cache, cfg, provider, n, n_score.as_ref(), &h_term)?;
    Ok((gh, gn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{complex_normal, complex_normal_matrix};
    use crate::score::{GaussianInterferencePrior, ZeroScore};
    use crate::sde::VpSchedule;
    use crate::signal::{bpsk_pilot, PilotMatrix};
    use faer::Side;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c0() -> Complex64 {
        Complex64::new(0.0, 0.0)
    }

    fn vec_of(rng: &mut ChaCha8Rng, n: usize, var: f64) -> Vec<Complex64> {
        (0..n).map(|_| complex_normal(rng, var)).collect()
    }

    fn model(rng: &mut ChaCha8Rng, m: usize, l: usize, sigma2: f64) -> MeasurementModel {
        let a = PilotMatrix::new(bpsk_pilot(m + l - 1, rng).unwrap(), l).unwrap();
        let y = ComplexVector::new(vec_of(rng, m, 1.0)).unwrap();
        MeasurementModel::new(a, y, sigma2).unwrap()
    }

    fn time(t: f64) -> DiffusionTime {
        VpSchedule::default().at(t).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, m: usize) -> CMat {
        let b = complex_normal_matrix(rng, m, m, 1.0 / m as f64);
        let mut s = linalg::mul_adjoint(b.as_ref(), b.as_ref());
        for i in 0..m {
            s[(i, i)] += Complex64::new(0.1, 0.0);
        }
        s
    }

    /// `-(y - μ)ᴴ Σ⁻¹ (y - μ)` with a dense Cholesky solve.
    fn gauss_logpdf(y: &[Complex64], mu: &[Complex64], sigma: &CMat) -> f64 {
        let r = sub(y, mu);
        let s = linalg::cholesky_solve(sigma.as_ref(), linalg::from_column(&r).as_ref()).unwrap();
        -(0..r.len()).map(|i| (r[i].conj() * s[(i, 0)]).re).sum::<f64>()
    }

    /// Real gradient of `f` w.r.t. `(Re x, Im x)`, folded back to complex
    /// and halved so it is comparable with a conjugate Wirtinger score.
    fn fd_wirtinger(x: &[Complex64], f: impl Fn(&[Complex64]) -> f64) -> Vec<Complex64> {
        let eps = 1e-5;
        let mut out = Vec::with_capacity(x.len());
        let mut p = x.to_vec();
        for i in 0..x.len() {
            let mut part = [0.0; 2];
            for (k, d) in [Complex64::new(eps, 0.0), Complex64::new(0.0, eps)].into_iter().enumerate() {
                p[i] = x[i] + d;
                let fp = f(&p);
                p[i] = x[i] - d;
                let fm = f(&p);
                p[i] = x[i];
                part[k] = (fp - fm) / (2.0 * eps);
            }
            out.push(Complex64::new(part[0], part[1]) * 0.5);
        }
        out
    }

    fn rel(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn method_parses() {
        assert_eq!("DMPS".parse::<GuidanceMethod>().unwrap(), GuidanceMethod::Dmps);
        assert_eq!("pgdm".parse::<GuidanceMethod>().unwrap(), GuidanceMethod::Pgdm);
        assert!("dps".parse::<GuidanceMethod>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { mu: -1.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { kappa: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }

    #[test]
    fn step_inverse_matches_dense_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cache = LikelihoodCache::new(&model(&mut rng, 12, 5, 0.01)).unwrap();
        for method in [GuidanceMethod::Dmps, GuidanceMethod::Pgdm] {
            for &t in &[0.01, 0.5, 1.0] {
                let step = cache.step(method, time(t));
                let sigma = cache.sigma_y(method, time(t));
                let prod = linalg::mul(sigma.as_ref(), step.sigma_inv.as_ref());
                for i in 0..12 {
                    for j in 0..12 {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((prod[(i, j)] - Complex64::new(want, 0.0)).norm() < 1e-9);
                    }
                }
                let ga = linalg::mul(step.sigma_inv.as_ref(), cache.a());
                let gram = linalg::mul_adjoint(cache.a(), ga.as_ref());
                for i in 0..5 {
                    for j in 0..5 {
                        assert!((gram[(i, j)] - step.gram[(i, j)]).norm() < 1e-9 * (1.0 + gram[(i, j)].norm()));
                    }
                }
            }
        }
    }

    #[test]
    fn sigma_y_is_hermitian_pd_on_the_whole_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cache = LikelihoodCache::new(&model(&mut rng, 20, 8, 1e-3)).unwrap();
        let sched = VpSchedule::new(0.1, 20.0, 100).unwrap();
        for method in [GuidanceMethod::Dmps, GuidanceMethod::Pgdm] {
            for i in 0..sched.steps {
                let tm = sched.at(sched.step_time(i)).unwrap();
                let s = cache.sigma_y(method, tm);
                assert!(linalg::hermitian_defect(s.as_ref()) < 1e-12);
                assert!(s.llt(Side::Lower).is_ok(), "{method} step {i}");
            }
        }
    }

    #[test]
    fn dmps_zero_residual_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut md = model(&mut rng, 10, 4, 0.1);
        let tm = time(0.4);
        let h = vec_of(&mut rng, 4, 1.0);
        let n = vec_of(&mut rng, 10, 1.0);
        let ah = md.a.apply(&h).unwrap();
        md.y = ComplexVector::new(ah.iter().zip(&n).map(|(a, b)| (a + b) / tm.alpha).collect()).unwrap();
        let cache = LikelihoodCache::new(&md).unwrap();
        let (gh, gn) = dmps_likelihood_scores(&h, &n, &cache, tm).unwrap();
        assert!(gh.norm_sqr().sqrt() < 1e-10 && gn.norm_sqr().sqrt() < 1e-10);
    }

    #[test]
    fn pgdm_zero_score_zero_residual_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut md = model(&mut rng, 10, 4, 0.1);
        let tm = time(0.6);
        let h = vec_of(&mut rng, 4, 1.0);
        let n = vec_of(&mut rng, 10, 1.0);
        // with γ huge the channel Tweedie gain tends to 1/α, like a zero score
        let gamma = ChannelPriorState::constant(4, 1e12).unwrap();
        let gain = gamma.as_provider().tweedie_gain(tm)[0];
        let ah = md.a.apply(&h).unwrap();
        md.y = ComplexVector::new(ah.iter().zip(&n).map(|(a, b)| a * gain + b / tm.alpha).collect()).unwrap();
        let cache = LikelihoodCache::new(&md).unwrap();
        let (gh, gn) = pgdm_likelihood_scores(&h, &n, &cache, tm, &gamma, &ZeroScore).unwrap();
        assert!(gh.norm_sqr().sqrt() < 1e-9 && gn.norm_sqr().sqrt() < 1e-9);
    }

    #[test]
    fn dmps_with_identity_operator_has_symmetric_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // a single-tap unit pilot gives A = I
        let a = PilotMatrix::new(ComplexVector::new(vec![Complex64::new(1.0, 0.0); 6]).unwrap(), 1).unwrap();
        let y = ComplexVector::new(vec_of(&mut rng, 6, 1.0)).unwrap();
        let cache = LikelihoodCache::new(&MeasurementModel::new(a, y, 0.05).unwrap()).unwrap();
        let h = vec_of(&mut rng, 1, 1.0);
        let n = vec_of(&mut rng, 6, 1.0);
        let (gh, gn) = dmps_likelihood_scores(&h, &n, &cache, time(0.3)).unwrap();
        // A = ones(6,1): grad_h is the sum of grad_n
        let sum: Complex64 = gn.iter().sum();
        assert!((gh[0] - sum).norm() < 1e-12);

        let a = PilotMatrix::new(ComplexVector::new(vec![Complex64::new(1.0, 0.0)]).unwrap(), 1).unwrap();
        let y = ComplexVector::new(vec_of(&mut rng, 1, 1.0)).unwrap();
        let cache = LikelihoodCache::new(&MeasurementModel::new(a, y, 0.05).unwrap()).unwrap();
        let (gh, gn) = dmps_likelihood_scores(&[Complex64::new(0.2, 0.1)], &[Complex64::new(-0.3, 0.5)], &cache, time(0.3))
            .unwrap();
        assert!((gh[0] - gn[0]).norm() < 1e-14);
    }

    #[test]
    fn dmps_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let md = model(&mut rng, 9, 4, 0.02);
            let cache = LikelihoodCache::new(&md).unwrap();
            let tm = time(rng.random_range(0.05..1.0));
            let h = vec_of(&mut rng, 4, 1.0);
            let n = vec_of(&mut rng, 9, 1.0);
            let sigma = cache.sigma_y(GuidanceMethod::Dmps, tm);
            let mean = |h: &[Complex64], n: &[Complex64]| -> Vec<Complex64> {
                let ah = md.a.apply(h).unwrap();
                ah.iter().zip(n).map(|(a, b)| (a + b) / tm.alpha).collect()
            };
            let (gh, gn) = dmps_likelihood_scores(&h, &n, &cache, tm).unwrap();
            let fh = fd_wirtinger(&h, |hh| gauss_logpdf(&md.y, &mean(hh, &n), &sigma));
            let fnn = fd_wirtinger(&n, |nn| gauss_logpdf(&md.y, &mean(&h, nn), &sigma));
            assert!(rel(&gh, &fh) < 1e-4, "{}", rel(&gh, &fh));
            assert!(rel(&gn, &fnn) < 1e-4, "{}", rel(&gn, &fnn));
        }
    }

    #[test]
    fn pgdm_matches_finite_differences_with_gaussian_interference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let md = model(&mut rng, 8, 3, 0.02);
            let cache = LikelihoodCache::new(&md).unwrap();
            let tm = time(rng.random_range(0.05..1.0));
            let gamma = ChannelPriorState::new((0..3).map(|_| rng.random_range(0.05..2.0)).collect()).unwrap();
            let prior = GaussianInterferencePrior::new(random_psd(&mut rng, 8)).unwrap();
            let h = vec_of(&mut rng, 3, 1.0);
            let n = vec_of(&mut rng, 8, 1.0);
            let sigma = cache.sigma_y(GuidanceMethod::Pgdm, tm);
            let gain = gamma.as_provider().tweedie_gain(tm);
            let mean = |h: &[Complex64], n: &[Complex64]| -> Vec<Complex64> {
                let hh: Vec<Complex64> = h.iter().zip(&gain).map(|(x, g)| x * g).collect();
                let nh = prior.denoise_batch(linalg::from_column(n).as_ref(), tm).unwrap();
                let ah = md.a.apply(&hh).unwrap();
                (0..8).map(|i| ah[i] + nh[(i, 0)]).collect()
            };
            let (gh, gn) = pgdm_likelihood_scores(&h, &n, &cache, tm, &gamma, &prior).unwrap();
            let fh = fd_wirtinger(&h, |x| gauss_logpdf(&md.y, &mean(x, &n), &sigma));
            let fnn = fd_wirtinger(&n, |x| gauss_logpdf(&md.y, &mean(&h, x), &sigma));
            assert!(rel(&gh, &fh) < 1e-4, "{}", rel(&gh, &fh));
            assert!(rel(&gn, &fnn) < 1e-4, "{}", rel(&gn, &fnn));
        }
    }

    /// Term-by-term evaluation of the coupled scores with explicit loops over
    /// `i` and `j`.
    fn double_loop(
        method: GuidanceMethod,
        cache: &LikelihoodCache,
        cfg: &GuidanceConfig,
        prior: &GaussianInterferencePrior,
        gamma: &ChannelPriorState,
        tm: DiffusionTime,
        hs: &[Vec<Complex64>],
        ns: &[Vec<Complex64>],
    ) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
        let k = hs.len();
        let sigma = cache.sigma_y(method, tm);
        let solve = |r: &[Complex64]| {
            linalg::column(linalg::cholesky_solve(sigma.as_ref(), linalg::from_column(r).as_ref()).unwrap().as_ref(), 0)
        };
        let a = cache.a();
        let gain = gamma.as_provider().tweedie_gain(tm);
        let var = gamma.perturbed_variances(tm);
        let nhat = |n: &[Complex64]| {
            linalg::column(prior.denoise_batch(linalg::from_column(n).as_ref(), tm).unwrap().as_ref(), 0)
        };
        let nscore = |n: &[Complex64]| {
            linalg::column(prior.score_batch(linalg::from_column(n).as_ref(), tm).unwrap().as_ref(), 0)
        };
        let mut gh = Vec::new();
        let mut gn = Vec::new();
        for i in 0..k {
            let mut acc_h = vec![c0(); hs[i].len()];
            let mut acc_n = vec![c0(); ns[i].len()];
            for j in 0..k {
                match method {
                    GuidanceMethod::Dmps => {
                        let ia = 1.0 / tm.alpha;
                        let ah_i = apply(a, &hs[i]);
                        let ah_j = apply(a, &hs[j]);
                        let r_h: Vec<Complex64> =
                            (0..ah_i.len()).map(|m| cache.y()[m] - ah_i[m] * ia - ns[j][m] * ia).collect();
                        let r_n: Vec<Complex64> =
                            (0..ah_i.len()).map(|m| cache.y()[m] - ah_j[m] * ia - ns[i][m] * ia).collect();
                        let th = adjoint_apply(a, &solve(&r_h));
                        let tn = solve(&r_n);
                        acc_h.iter_mut().zip(&th).for_each(|(x, v)| *x += v * ia);
                        acc_n.iter_mut().zip(&tn).for_each(|(x, v)| *x += v * ia);
                    }
                    GuidanceMethod::Pgdm => {
                        let hh = |h: &[Complex64]| -> Vec<Complex64> { h.iter().zip(&gain).map(|(x, g)| x * g).collect() };
                        let ah_i = apply(a, &hh(&hs[i]));
                        let ah_j = apply(a, &hh(&hs[j]));
                        let nh_i = nhat(&ns[i]);
                        let nh_j = nhat(&ns[j]);
                        let r_h: Vec<Complex64> = (0..ah_i.len()).map(|m| cache.y()[m] - ah_i[m] - nh_j[m]).collect();
                        let r_n: Vec<Complex64> = (0..ah_i.len()).map(|m| cache.y()[m] - ah_j[m] - nh_i[m]).collect();
                        let th = adjoint_apply(a, &solve(&r_h));
                        let sn = solve(&r_n);
                        let tn = linalg::column(
                            prior
                                .tweedie_vjp_batch(
                                    linalg::from_column(&sn).as_ref(),
                                    linalg::from_column(&ns[i]).as_ref(),
                                    tm,
                                )
                                .unwrap()
                                .as_ref(),
                            0,
                        );
                        acc_h.iter_mut().zip(th.iter().zip(&gain)).for_each(|(x, (v, g))| *x += v * g);
                        acc_n.iter_mut().zip(&tn).for_each(|(x, v)| *x += v);
                    }
                }
            }
            let s = nscore(&ns[i]);
            gh.push((0..acc_h.len()).map(|l| acc_h[l] / k as f64 - hs[i][l] * (cfg.mu / var[l])).collect());
            gn.push((0..acc_n.len()).map(|m| acc_n[m] / k as f64 + s[m] * cfg.kappa).collect());
        }
        (gh, gn)
    }

    #[test]
    fn four_sample_assembly_equals_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let md = model(&mut rng, 10, 4, 0.03);
        let cache = LikelihoodCache::new(&md).unwrap();
        let prior = GaussianInterferencePrior::new(random_psd(&mut rng, 10)).unwrap();
        let gamma = ChannelPriorState::new(vec![0.3, 1.2, 0.05, 0.8]).unwrap();
        for method in [GuidanceMethod::Dmps, GuidanceMethod::Pgdm] {
            let cfg = GuidanceConfig { method, mu: 0.7, kappa: 1.3, k: 4 };
            let tm = time(0.37);
            let hs: Vec<Vec<Complex64>> = (0..4).map(|_| vec_of(&mut rng, 4, 1.0)).collect();
            let ns: Vec<Vec<Complex64>> = (0..4).map(|_| vec_of(&mut rng, 10, 1.0)).collect();
            let step = cache.step(method, tm);
            let hm = linalg::from_columns(&hs);
            let nm = linalg::from_columns(&ns);
            let (gh, gn) = assemble_posterior_scores(&step, &cache, &cfg, &prior, hm.as_ref(), nm.as_ref(), &gamma).unwrap();
            let (wh, wn) = double_loop(method, &cache, &cfg, &prior, &gamma, tm, &hs, &ns);
            for i in 0..4 {
                assert!(rel(&linalg::column(gh.as_ref(), i), &wh[i]) < 1e-11, "{method} h {i}");
                assert!(rel(&linalg::column(gn.as_ref(), i), &wn[i]) < 1e-11, "{method} n {i}");
            }
        }
    }

    #[test]
    fn single_sample_assembly_with_zero_weights_is_pure_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let md = model(&mut rng, 7, 3, 0.05);
        let cache = LikelihoodCache::new(&md).unwrap();
        let prior = GaussianInterferencePrior::new(random_psd(&mut rng, 7)).unwrap();
        let gamma = ChannelPriorState::new(vec![0.5, 0.2, 1.0]).unwrap();
        let tm = time(0.5);
        let h = vec_of(&mut rng, 3, 1.0);
        let n = vec_of(&mut rng, 7, 1.0);
        let hm = linalg::from_column(&h);
        let nm = linalg::from_column(&n);
        for method in [GuidanceMethod::Dmps, GuidanceMethod::Pgdm] {
            let cfg = GuidanceConfig { method, mu: 0.0, kappa: 0.0, k: 1 };
            let step = cache.step(method, tm);
            let (gh, gn) = assemble_posterior_scores(&step, &cache, &cfg, &prior, hm.as_ref(), nm.as_ref(), &gamma).unwrap();
            let (wh, wn) = match method {
                GuidanceMethod::Dmps => dmps_likelihood_scores(&h, &n, &cache, tm).unwrap(),
                GuidanceMethod::Pgdm => pgdm_likelihood_scores(&h, &n, &cache, tm, &gamma, &prior).unwrap(),
            };
            assert!(rel(&linalg::column(gh.as_ref(), 0), &wh) < 1e-11);
            assert!(rel(&linalg::column(gn.as_ref(), 0), &wn) < 1e-11);
        }
    }

    #[test]
    fn dmps_gradients_are_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cache = LikelihoodCache::new(&model(&mut rng, 8, 3, 0.05)).unwrap();
        let tm = time(0.45);
        let (h1, h2) = (vec_of(&mut rng, 3, 1.0), vec_of(&mut rng, 3, 1.0));
        let (n1, n2) = (vec_of(&mut rng, 8, 1.0), vec_of(&mut rng, 8, 1.0));
        let w = 0.3;
        let mix = |a: &[Complex64], b: &[Complex64]| -> Vec<Complex64> {
            a.iter().zip(b).map(|(x, y)| x * w + y * (1.0 - w)).collect()
        };
        let g1 = dmps_likelihood_scores(&h1, &n1, &cache, tm).unwrap();
        let g2 = dmps_likelihood_scores(&h2, &n2, &cache, tm).unwrap();
        let gm = dmps_likelihood_scores(&mix(&h1, &h2), &mix(&n1, &n2), &cache, tm).unwrap();
        assert!(rel(&gm.0, &mix(&g1.0, &g2.0)) < 1e-12);
        assert!(rel(&gm.1, &mix(&g1.1, &g2.1)) < 1e-12);
    }

    #[test]
    fn mismatched_ensembles_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cache = LikelihoodCache::new(&model(&mut rng, 6, 2, 0.1)).unwrap();
        let step = cache.step(GuidanceMethod::Dmps, time(0.5));
        let gamma = ChannelPriorState::constant(2, 1.0).unwrap();
        let cfg = GuidanceConfig::default();
        let h = CMat::zeros(2, 3);
        let n = CMat::zeros(6, 2);
        assert!(assemble_posterior_scores(&step, &cache, &cfg, &ZeroScore, h.as_ref(), n.as_ref(), &gamma).is_err());
        let h = CMat::zeros(2, 0);
        let n = CMat::zeros(6, 0);
        assert!(assemble_posterior_scores(&step, &cache, &cfg, &ZeroScore, h.as_ref(), n.as_ref(), &gamma).is_err());
    }
}
