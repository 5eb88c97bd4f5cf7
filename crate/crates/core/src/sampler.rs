//! K-sample predictor-corrector reverse sampler with EM updates of the
//! channel prior variances.
//!
//! Scores are conjugate Wirtinger gradients, so the real-coordinate gradient
//! used by the Langevin and reverse-SDE updates is twice the score. Noise is
//! `CN(0, 2I)`, i.e. unit variance per real coordinate.

use std::io::Write;
use std::path::Path;

use faer::MatRef;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceConfig, LikelihoodCache, StepCache};
use crate::linalg::{self, complex_normal, CMat};
use crate::score::{ChannelPriorState, ScoreProvider, GAMMA_FLOOR};
use crate::sde::{DiffusionTime, VpSchedule};
use crate::signal::{ComplexVector, MeasurementModel};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Schedule; `schedule.steps` is `T`.
    pub schedule: VpSchedule,
    /// Guidance method, weights and ensemble size `K`.
    pub guidance: GuidanceConfig,
    /// Corrector step scale.
    pub nu: f64,
    /// Initial `γ` value.
    pub rho: f64,
    pub em_enabled: bool,
    pub seed: u64,
    /// Langevin iterations per step.
    pub corrector_steps: usize,
    /// Overrides `rho` when set.
    pub initial_gamma: Option<Vec<f64>>,
    /// Upper clamp on EM updates of `γ`; `f64::INFINITY` disables it.
    pub gamma_max: f64,
    /// Drop the noise term of the last predictor step (returns its mean).
    pub denoise_final: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: VpSchedule::default(),
            guidance: GuidanceConfig::default(),
            nu: 0.16,
            rho: 1.0,
            em_enabled: true,
            seed: 0,
            corrector_steps: 1,
            initial_gamma: None,
            gamma_max: 1.0,
            denoise_final: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        VpSchedule::new(self.schedule.beta_min, self.schedule.beta_max, self.schedule.steps)?;
        self.guidance.validate()?;
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::Config(format!("sampler.nu must be > 0, got {}", self.nu)));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Config(format!("sampler.rho must be > 0, got {}", self.rho)));
        }
        if !(self.gamma_max >= GAMMA_FLOOR) {
            return Err(Error::Config(format!("sampler.gamma_max must be >= {GAMMA_FLOOR}, got {}", self.gamma_max)));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.guidance.k
    }
}

/// `K` channel and interference samples stored column-wise.
#[derive(Debug, Clone)]
pub struct SampleEnsemble {
    /// `L × K`
    pub h: CMat,
    /// `M × K`
    pub n: CMat,
    pub gamma: ChannelPriorState,
    pub t: f64,
}

impl SampleEnsemble {
    pub fn k(&self) -> usize {
        self.h.ncols()
    }
}

/// Draw the `t = 1` ensemble: every entry `CN(0, 2(1 - α²(1)))`, `γ = ρ`.
pub fn initialize<R: Rng + ?Sized>(cfg: &SamplerConfig, taps: usize, measurements: usize, rng: &mut R) -> Result<SampleEnsemble> {
    if taps == 0 || measurements == 0 {
        return Err(Error::InvalidDimensions("L and M must be positive".into()));
    }
    let var = cfg.schedule.at(1.0)?.kernel_var();
    let k = cfg.k();
    let h = linalg::complex_normal_matrix(rng, taps, k, var);
    let n = linalg::complex_normal_matrix(rng, measurements, k, var);
    let gamma = match &cfg.initial_gamma {
        Some(g) => {
            if g.len() != taps {
                return Err(Error::InvalidDimensions(format!("initial γ has length {}, L = {taps}", g.len())));
            }
            ChannelPriorState::new(g.clone())?
        }
        None => ChannelPriorState::constant(taps, cfg.rho)?,
    };
    Ok(SampleEnsemble { h, n, gamma, t: 1.0 })
}

/// Sample mean and per-entry mean squared deviation over the columns.
pub fn sample_moments(h: MatRef<'_, Complex64>) -> (Vec<Complex64>, Vec<f64>) {
    let mean = linalg::column_mean(h);
    let k = h.ncols() as f64;
    let mut var = vec![0.0; h.nrows()];
    for j in 0..h.ncols() {
        for (i, v) in var.iter_mut().enumerate() {
            *v += (h[(i, j)] - mean[i]).norm_sqr();
        }
    }
    var.iter_mut().for_each(|v| *v /= k);
    (mean, var)
}

/// Maximizer of the expected log prior of `h_t`:
/// `γ = (ν_h + |ĥ|²)/α² - 2(1 - α²)/α²`, clamped at the floor.
pub fn em_update_gamma(h: MatRef<'_, Complex64>, time: DiffusionTime) -> Result<ChannelPriorState> {
    let (mean, var) = sample_moments(h);
    let a2 = time.safe_alpha().powi(2);
    let r2 = time.kernel_var();
    let gamma = mean.iter().zip(&var).map(|(m, v)| ((v + m.norm_sqr() - r2) / a2).max(GAMMA_FLOOR)).collect();
    ChannelPriorState::new(gamma)
}

/// The expected log prior maximized by [`em_update_gamma`], up to a constant.
pub fn em_objective(gamma: &[f64], second_moment: &[f64], time: DiffusionTime) -> f64 {
    let (a2, r2) = (time.alpha_sq(), time.kernel_var());
    gamma.iter().zip(second_moment).map(|(g, e)| {
        let s = r2 + a2 * g;
        -e / s - s.ln()
    }).sum()
}

/// Langevin moves taken and skipped because the gradient vanished.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoveStats {
    pub moves: usize,
    pub zero_gradient_skips: usize,
}

fn langevin<R: Rng + ?Sized>(x: &mut CMat, grad: &CMat, nu: f64, rng: &mut R, stats: &mut MoveStats) {
    for j in 0..x.ncols() {
        // real-coordinate gradient is 2g
        let g = grad.col_as_slice(j);
        let norm2: f64 = 4.0 * g.iter().map(|z| z.norm_sqr()).sum::<f64>();
        if norm2 == 0.0 {
            stats.zero_gradient_skips += 1;
            continue;
        }
        stats.moves += 1;
        let xi = nu / norm2;
        let noise_sd = (2.0 * xi).sqrt();
        for (v, gg) in x.col_as_slice_mut(j).iter_mut().zip(g) {
            *v += gg * (2.0 * xi) + complex_normal(rng, 2.0) * noise_sd;
        }
    }
}

fn euler_maruyama<R: Rng + ?Sized>(x: &mut CMat, grad: &CMat, beta: f64, dt: f64, noise: bool, rng: &mut R) {
    let sd = (beta * dt).sqrt();
    for j in 0..x.ncols() {
        for (v, g) in x.col_as_slice_mut(j).iter_mut().zip(grad.col_as_slice(j)) {
            *v += (*v * (0.5 * beta) + g * (2.0 * beta)) * dt;
            if noise {
                *v += complex_normal(rng, 2.0) * sd;
            }
        }
    }
}

fn check_finite(m: &CMat, step: usize, t: f64, branch: &str) -> Result<()> {
    if linalg::all_finite(m.as_ref()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite sample at step {step} (t = {t:.6}) in the {branch} branch")))
    }
}

/// One corrector pass at fixed `t`: the channel samples move first, then the
/// interference samples move using the updated channel ensemble.
#[allow(clippy::too_many_arguments)]
pub fn corrector_step<R: Rng + ?Sized>(
    ens: &mut SampleEnsemble,
    step: &StepCache,
    cache: &LikelihoodCache,
    cfg: &SamplerConfig,
    provider: &dyn ScoreProvider,
    rng: &mut R,
    stats: &mut MoveStats,
) -> Result<()> {
    let n_score = provider.score_batch(ens.n.as_ref(), step.time)?;
    let n_term = guidance::interference_term(step, ens.n.as_ref(), n_score.as_ref());
    let gh = guidance::h_posterior_scores(step, cache, &cfg.guidance, ens.h.as_ref(), &ens.gamma, &n_term)?;
    langevin(&mut ens.h, &gh, cfg.nu, rng, stats);
    let h_term = guidance::channel_term(step, ens.h.as_ref(), &ens.gamma);
    let gn =
        guidance::n_posterior_scores(step, cache, &cfg.guidance, provider, ens.n.as_ref(), n_score.as_ref(), &h_term)?;
    langevin(&mut ens.n, &gn, cfg.nu, rng, stats);
    Ok(())
}

/// Reverse-SDE Euler-Maruyama step from `t` to `t - dt` for both variables,
/// with both scores taken at the pre-step state. `noise = false` keeps only
/// the drift.
#[allow(clippy::too_many_arguments)]
pub fn predictor_step<R: Rng + ?Sized>(
    ens: &mut SampleEnsemble,
    step: &StepCache,
    cache: &LikelihoodCache,
    cfg: &SamplerConfig,
    provider: &dyn ScoreProvider,
    noise: bool,
    rng: &mut R,
) -> Result<()> {
    let (gh, gn) = guidance::assemble_posterior_scores(
        step,
        cache,
        &cfg.guidance,
        provider,
        ens.h.as_ref(),
        ens.n.as_ref(),
        &ens.gamma,
    )?;
    let beta = cfg.schedule.beta(step.time.t)?;
    let dt = cfg.schedule.dt();
    euler_maruyama(&mut ens.h, &gh, beta, dt, noise, rng);
    euler_maruyama(&mut ens.n, &gn, beta, dt, noise, rng);
    ens.t = (step.time.t - dt).max(0.0);
    Ok(())
}

/// One row of the diagnostics trace, recorded after each reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// NMSE of the ensemble mean (scaled by `1/α`) when the truth is known.
    pub nmse_mean_db: Option<f64>,
    pub nmse_sample_median_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::io("writing trace", e.into());
        w.write_record(["step", "t", "gamma_min", "gamma_max", "nmse_mean_db", "nmse_sample_median_db"]).map_err(io)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.t.to_string(),
                r.gamma_min.to_string(),
                r.gamma_max.to_string(),
                opt(r.nmse_mean_db),
                opt(r.nmse_sample_median_db),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io("writing trace", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone)]
pub struct SamplerOutput {
    pub h_hat: ComplexVector,
    pub n_hat: ComplexVector,
    pub gamma: ChannelPriorState,
    pub trace: Trace,
    pub stats: MoveStats,
}

/// `10 log₁₀(‖x - truth‖² / ‖truth‖²)`, clamped below at -100 dB.
pub fn nmse_db(estimate: &[Complex64], truth: &[Complex64]) -> f64 {
    let err: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum();
    let p: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
    (10.0 * (err / p).log10()).max(-100.0)
}

fn trace_row(ens: &SampleEnsemble, step: usize, alpha: f64, truth: Option<&[Complex64]>) -> TraceRow {
    let (nmse_mean_db, nmse_sample_median_db) = match truth {
        Some(h) => {
            let a = alpha.max(crate::sde::ALPHA_FLOOR);
            let mean: Vec<Complex64> = linalg::column_mean(ens.h.as_ref()).iter().map(|z| z / a).collect();
            let mut per: Vec<f64> = (0..ens.k())
                .map(|j| {
                    let col: Vec<Complex64> = ens.h.col_as_slice(j).iter().map(|z| z / a).collect();
                    nmse_db(&col, h)
                })
                .collect();
            per.sort_by(f64::total_cmp);
            let med = if per.len() % 2 == 1 {
                per[per.len() / 2]
            } else {
                0.5 * (per[per.len() / 2 - 1] + per[per.len() / 2])
            };
            (Some(nmse_db(&mean, h)), Some(med))
        }
        None => (None, None),
    };
    TraceRow {
        step,
        t: ens.t,
        gamma_min: ens.gamma.min(),
        gamma_max: ens.gamma.max(),
        nmse_mean_db,
        nmse_sample_median_db,
    }
}

/// Run the full reverse sampler and return the `t = 0` ensemble means.
pub fn run(
    model: &MeasurementModel,
    cfg: &SamplerConfig,
    provider: &dyn ScoreProvider,
    truth: Option<&[Complex64]>,
) -> Result<SamplerOutput> {
    cfg.validate()?;
    if let Some(h) = truth {
        if h.len() != model.taps() {
            return Err(Error::InvalidDimensions(format!("truth has length {}, L = {}", h.len(), model.taps())));
        }
    }
    let cache = LikelihoodCache::new(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ens = initialize(cfg, model.taps(), model.measurements(), &mut rng)?;
    let sched = cfg.schedule;
    let mut trace = Trace::default();
    let mut stats = MoveStats::default();
    for i in (0..sched.steps).rev() {
        let t = sched.step_time(i);
        let time = sched.at(t)?;
        let step = cache.step(cfg.guidance.method, time);
        ens.t = t;
        for _ in 0..cfg.corrector_steps {
            corrector_step(&mut ens, &step, &cache, cfg, provider, &mut rng, &mut stats)?;
            check_finite(&ens.h, i, t, "corrector channel")?;
            check_finite(&ens.n, i, t, "corrector interference")?;
            if cfg.em_enabled {
                ens.gamma = em_update_gamma(ens.h.as_ref(), time)?.capped(cfg.gamma_max);
            }
        }
        let noise = !(cfg.denoise_final && i == 0);
        predictor_step(&mut ens, &step, &cache, cfg, provider, noise, &mut rng)?;
        check_finite(&ens.h, i, t, "predictor channel")?;
        check_finite(&ens.n, i, t, "predictor interference")?;
        let next = sched.at(ens.t)?;
        if cfg.em_enabled {
            ens.gamma = em_update_gamma(ens.h.as_ref(), next)?.capped(cfg.gamma_max);
        }
        trace.rows.push(trace_row(&ens, i, next.alpha, truth));
    }
    if stats.zero_gradient_skips > 0 {
        log::warn!("{} Langevin moves skipped on zero gradients", stats.zero_gradient_skips);
    }
    Ok(SamplerOutput {
        h_hat: ComplexVector::new(linalg::column_mean(ens.h.as_ref()))?,
        n_hat: ComplexVector::new(linalg::column_mean(ens.n.as_ref()))?,
        gamma: ens.gamma,
        trace,
        stats,
    })
}
