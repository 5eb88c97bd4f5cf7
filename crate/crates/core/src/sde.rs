//! Variance-preserving SDE schedule and the complex perturbation kernel.
//!
//! Complex signals diffuse with independent real and imaginary parts, so
//! the kernel `p(x_t | x_0) = CN(α(t) x_0, 2(1 - α²(t)) I)` has per-part
//! variance `1 - α²(t)`.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::complex_normal;
use crate::signal::ComplexVector;

/// Lower bound on `α` wherever it appears in a denominator.
pub const ALPHA_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Number of reverse steps `T`.
    pub steps: usize,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, steps: 500 }
    }
}

/// Kernel quantities at one diffusion time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTime {
    pub t: f64,
    pub alpha: f64,
}

impl DiffusionTime {
    /// Complex kernel variance `2(1 - α²)`.
    pub fn kernel_var(&self) -> f64 {
        2.0 * (1.0 - self.alpha * self.alpha)
    }

    pub fn alpha_sq(&self) -> f64 {
        self.alpha * self.alpha
    }

    /// `α` clamped at [`ALPHA_FLOOR`] for use as a divisor.
    pub fn safe_alpha(&self) -> f64 {
        self.alpha.max(ALPHA_FLOOR)
    }
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64, steps: usize) -> Result<Self> {
        if !(beta_min.is_finite() && beta_min > 0.0 && beta_max.is_finite() && beta_max > beta_min) {
            return Err(Error::Config(format!(
                "need 0 < beta_min < beta_max, got beta_min = {beta_min}, beta_max = {beta_max}"
            )));
        }
        if steps < 2 {
            return Err(Error::Config(format!("need at least 2 diffusion steps, got {steps}")));
        }
        Ok(Self { beta_min, beta_max, steps })
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    /// `α(t) = exp(-½ ∫₀ᵗ β) = exp(-¼ t (β(t) + β_min))`, the marginal mean
    /// factor of the forward SDE driven by `β(t)`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        let b = self.beta(t)?;
        Ok((-0.25 * t * (b + self.beta_min)).exp())
    }

    pub fn at(&self, t: f64) -> Result<DiffusionTime> {
        Ok(DiffusionTime { t, alpha: self.alpha(t)? })
    }

    /// Time of reverse step `i` (counting down from `T-1` to 0): `(i + 1) / T`.
    pub fn step_time(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.steps as f64
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Sample the forward kernel: `α(t) x0 + w`, `w ~ CN(0, 2(1 - α²) I)`.
pub fn perturb<R: Rng + ?Sized>(
    schedule: &VpSchedule,
    x0: &ComplexVector,
    t: f64,
    rng: &mut R,
) -> Result<ComplexVector> {
    let time = schedule.at(t)?;
    let var = time.kernel_var();
    let out = x0.iter().map(|x| x * time.alpha + complex_normal(rng, var)).collect();
    ComplexVector::new(out)
}

/// Tweedie posterior-mean estimate of `x_0`: `(x_t + 2(1 - α²) score) / α`.
pub fn tweedie_denoise(x_t: &[Complex64], time: DiffusionTime, score: &[Complex64]) -> Result<ComplexVector> {
    if x_t.len() != score.len() {
        return Err(Error::InvalidDimensions(format!("x_t length {} != score length {}", x_t.len(), score.len())));
    }
    let var = time.kernel_var();
    let a = time.safe_alpha();
    ComplexVector::new(x_t.iter().zip(score).map(|(x, s)| (x + s * var) / a).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> VpSchedule {
        VpSchedule::default()
    }

    #[test]
    fn alpha_endpoints() {
        assert_eq!(sched().alpha(0.0).unwrap(), 1.0);
        // exp(-20.1 / 4)
        let a1 = sched().alpha(1.0).unwrap();
        assert!((a1 - 6.571_586_494_929_613e-3).abs() < 1e-12, "{a1}");
    }

    #[test]
    fn alpha_midpoint_matches_scalar_evaluation() {
        // β(0.5) = 10.05; α = exp(-0.5 · 10.15 / 4) = exp(-1.26875)
        let want = (-1.26875f64).exp();
        assert!((sched().alpha(0.5).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.281_182_880_796_752_35).abs() < 1e-9);
    }

    #[test]
    fn alpha_matches_quadrature_of_beta() {
        let s = VpSchedule::new(0.3, 12.0, 10).unwrap();
        for &t in &[0.01, 0.2, 0.5, 0.77, 1.0] {
            // composite Simpson on ∫β, exact for a linear integrand
            let n = 64;
            let h = t / n as f64;
            let mut acc = s.beta(0.0).unwrap() + s.beta(t).unwrap();
            for k in 1..n {
                acc += if k % 2 == 1 { 4.0 } else { 2.0 } * s.beta(k as f64 * h).unwrap();
            }
            let want = (-0.5 * acc * h / 3.0).exp();
            assert!((s.alpha(t).unwrap() / want - 1.0).abs() < 1e-13, "t={t}");
        }
    }

    #[test]
    fn log_alpha_derivative_is_half_beta() {
        // d/dt ln α = -β/2 is what the reverse SDE drift assumes
        let s = sched();
        for &t in &[0.05, 0.3, 0.6, 0.95] {
            let e = 1e-6;
            let d = (s.alpha(t + e).unwrap().ln() - s.alpha(t - e).unwrap().ln()) / (2.0 * e);
            assert!((d + 0.5 * s.beta(t).unwrap()).abs() < 1e-7, "t={t}: {d}");
        }
    }

    #[test]
    fn alpha_rejects_out_of_range_time() {
        assert!(matches!(sched().alpha(-0.01), Err(Error::Domain(_))));
        assert!(matches!(sched().alpha(1.01), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_is_strictly_decreasing() {
        let s = sched();
        let a: Vec<f64> = (0..=1000).map(|i| s.alpha(i as f64 / 1000.0).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[1] < w[0]));
        assert!(a.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn schedule_validation() {
        assert!(VpSchedule::new(0.1, 20.0, 2).is_ok());
        assert!(VpSchedule::new(0.0, 20.0, 10).is_err());
        assert!(VpSchedule::new(5.0, 1.0, 10).is_err());
        assert!(VpSchedule::new(0.1, 20.0, 1).is_err());
    }

    #[test]
    fn perturb_at_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ComplexVector::new(vec![Complex64::new(0.3, -1.2), Complex64::new(2.0, 0.1)]).unwrap();
        assert_eq!(perturb(&sched(), &x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn perturb_at_one_has_variance_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ComplexVector::zeros(100_000);
        let p = perturb(&sched(), &x, 1.0, &mut rng).unwrap();
        let var = p.norm_sqr() / p.len() as f64;
        let want = 2.0 * (1.0 - sched().alpha(1.0).unwrap().powi(2));
        assert!((var / want - 1.0).abs() < 0.03, "{var}");
        let re_var = p.iter().map(|z| z.re * z.re).sum::<f64>() / p.len() as f64;
        assert!((re_var / (want / 2.0) - 1.0).abs() < 0.03);
    }

    #[test]
    fn perturb_mean_is_scaled_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = ComplexVector::new(vec![Complex64::new(1.0, -0.5)]).unwrap();
        let time = sched().at(0.5).unwrap();
        let draws = 20_000;
        let mut mean = Complex64::new(0.0, 0.0);
        for _ in 0..draws {
            mean += perturb(&sched(), &x0, 0.5, &mut rng).unwrap()[0];
        }
        mean /= draws as f64;
        let sd = (time.kernel_var() / 2.0 / draws as f64).sqrt();
        let want = x0[0] * time.alpha;
        assert!((mean.re - want.re).abs() < 3.0 * sd && (mean.im - want.im).abs() < 3.0 * sd);
    }

    #[test]
    fn zero_score_at_time_zero_is_identity() {
        let x = vec![Complex64::new(0.5, 0.25); 3];
        let out = tweedie_denoise(&x, sched().at(0.0).unwrap(), &[Complex64::new(0.0, 0.0); 3]).unwrap();
        assert_eq!(out.as_slice(), &x[..]);
    }

    #[test]
    fn tweedie_scalar_gaussian_case() {
        // γ = 1, α = 0.8: E[x0 | x_t] = α γ x_t / (α² γ + 2(1 - α²)) = 0.8 x_t / 1.36
        let time = DiffusionTime { t: 0.3, alpha: 0.8 };
        let x = Complex64::new(1.5, -0.7);
        let score = -x / (0.64 + 0.72);
        let got = tweedie_denoise(&[x], time, &[score]).unwrap()[0];
        assert!((got - x * 0.8 / 1.36).norm() < 1e-14);
    }

    #[test]
    fn tweedie_with_exact_gaussian_score_is_posterior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 6;
        let b = linalg::complex_normal_matrix(&mut rng, m, m, 1.0);
        let sigma = linalg::mul_adjoint(b.as_ref(), b.as_ref());
        let time = sched().at(0.4).unwrap();
        let (a2, r2) = (time.alpha_sq(), time.kernel_var());
        // Σ_t = α² Σ + r² I
        let mut sigma_t = sigma.clone();
        for j in 0..m {
            for i in 0..m {
                sigma_t[(i, j)] *= a2;
            }
            sigma_t[(j, j)] += Complex64::new(r2, 0.0);
        }
        let x_t: Vec<Complex64> = (0..m).map(|_| linalg::complex_normal(&mut rng, 1.0)).collect();
        let solved = linalg::cholesky_solve(sigma_t.as_ref(), linalg::from_column(&x_t).as_ref()).unwrap();
        let score: Vec<Complex64> = (0..m).map(|i| -solved[(i, 0)]).collect();
        let got = tweedie_denoise(&x_t, time, &score).unwrap();
        // Gaussian conditioning: α Σ Σ_t⁻¹ x_t
        let want = linalg::mul(sigma.as_ref(), solved.as_ref());
        for i in 0..m {
            assert!((got[i] - want[(i, 0)] * time.alpha).norm() < 1e-10);
        }
    }

    #[test]
    fn variance_preservation_for_unit_power_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = 50_000;
        let x0 = ComplexVector::new((0..l).map(|_| complex_normal(&mut rng, 2.0)).collect()).unwrap();
        let p0 = x0.norm_sqr() / l as f64;
        for &t in &[0.1, 0.5, 0.9] {
            let time = sched().at(t).unwrap();
            let p = perturb(&sched(), &x0, t, &mut rng).unwrap().norm_sqr() / l as f64;
            let want = time.alpha_sq() * p0 + time.kernel_var();
            assert!((p / want - 1.0).abs() < 0.03, "t={t}: {p} vs {want}");
        }
    }
}
