//! Scenario generators: sparse multipath channels, structured interference,
//! BPSK pilots and SNR/SIR mixing.

use std::f64::consts::PI;

use faer::MatRef;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::ComplexVector;
use crate::error::{Error, Result};
use crate::linalg::{self, complex_normal, CMat, HermitianEigen};

const MAX_DELAY_REDRAWS: usize = 100;

/// Sparse underwater-acoustic style tapped-delay channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    /// Number of propagation paths `p0`.
    pub paths: usize,
    /// Virtual channel length `L` in taps.
    pub taps: usize,
    /// Mean of the exponential inter-arrival time between adjacent paths, seconds.
    pub inter_arrival_mean_s: f64,
    /// Mean power drop across `decay_span_s` of delay, dB.
    pub decay_db: f64,
    pub decay_span_s: f64,
    pub symbol_rate_hz: f64,
    /// Scale the taps to unit total power.
    pub normalize: bool,
}

impl ChannelSpec {
    pub fn new(paths: usize, taps: usize) -> Self {
        Self {
            paths,
            taps,
            inter_arrival_mean_s: 3e-3,
            decay_db: 20.0,
            decay_span_s: 30e-3,
            symbol_rate_hz: 4e3,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 || self.taps < self.paths {
            return Err(Error::Config(format!(
                "channel needs 1 <= p0 <= L, got p0 = {}, L = {}",
                self.paths, self.taps
            )));
        }
        let positive = [self.inter_arrival_mean_s, self.decay_span_s, self.symbol_rate_hz];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) || !self.decay_db.is_finite() {
            return Err(Error::Config("channel timing parameters must be finite and positive".into()));
        }
        Ok(())
    }

    /// Mean path power at a given delay, relative to delay zero.
    pub fn mean_power(&self, delay_s: f64) -> f64 {
        10f64.powf(-self.decay_db / 10.0 * delay_s / self.decay_span_s)
    }
}

/// One propagation path before it is folded onto the tap grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathTap {
    pub delay_s: f64,
    pub tap: usize,
    pub gain: Complex64,
}

/// Draw path delays and gains. The first path arrives at delay zero; the
/// delay set is redrawn whenever the last path falls off the tap grid.
pub fn draw_paths<R: Rng + ?Sized>(spec: &ChannelSpec, rng: &mut R) -> Result<Vec<PathTap>> {
    spec.validate()?;
    let inter = Exp::new(1.0 / spec.inter_arrival_mean_s).map_err(|e| Error::Config(e.to_string()))?;
    let max_delay = (spec.taps - 1) as f64 / spec.symbol_rate_hz;

    let mut delays = Vec::with_capacity(spec.paths);
    let mut attempt = 0;
    loop {
        delays.clear();
        let mut d = 0.0;
        delays.push(d);
        for _ in 1..spec.paths {
            d += inter.sample(rng);
            delays.push(d);
        }
        attempt += 1;
        let last_tap = (d * spec.symbol_rate_hz).round();
        if last_tap <= (spec.taps - 1) as f64 {
            break;
        }
        if attempt >= MAX_DELAY_REDRAWS {
            log::warn!(
                "channel delay spread exceeded {} taps after {attempt} draws; truncating late paths",
                spec.taps
            );
            delays.iter_mut().for_each(|x| *x = x.min(max_delay));
            break;
        }
    }

    Ok(delays
        .into_iter()
        .map(|delay_s| {
            let tap = ((delay_s * spec.symbol_rate_hz).round() as usize).min(spec.taps - 1);
            let gain = complex_normal(rng, spec.mean_power(delay_s));
            PathTap { delay_s, tap, gain }
        })
        .collect())
}

/// Length-`L` channel with `p0` Rayleigh paths; paths sharing a tap are summed.
pub fn generate_channel<R: Rng + ?Sized>(spec: &ChannelSpec, rng: &mut R) -> Result<ComplexVector> {
    let paths = draw_paths(spec, rng)?;
    let mut h = vec![Complex64::new(0.0, 0.0); spec.taps];
    for p in &paths {
        h[p.tap] += p.gain;
    }
    if spec.normalize {
        let norm = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            h.iter_mut().for_each(|z| *z /= norm);
        }
    }
    ComplexVector::new(h)
}

/// Random BPSK sequence with entries in {+1, -1}.
pub fn bpsk_pilot<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<ComplexVector> {
    ComplexVector::new(
        (0..len)
            .map(|_| Complex64::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0))
            .collect(),
    )
}

/// Zero-mean complex Gaussian process with a fixed covariance.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    covariance: CMat,
    eigen: HermitianEigen,
}

impl GaussianProcess {
    pub fn new(covariance: CMat) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() || covariance.nrows() == 0 {
            return Err(Error::InvalidDimensions("covariance must be square and non-empty".into()));
        }
        if linalg::hermitian_defect(covariance.as_ref()) > 1e-10 {
            return Err(Error::Domain("covariance is not Hermitian".into()));
        }
        let mut eigen = HermitianEigen::new(covariance.as_ref())?;
        let top = eigen.values.last().copied().unwrap_or(0.0).max(0.0);
        if eigen.values[0] < -1e-9 * top.max(1e-300) {
            return Err(Error::Domain(format!(
                "covariance is not positive semidefinite (min eigenvalue {})",
                eigen.values[0]
            )));
        }
        eigen.values.iter_mut().for_each(|l| *l = l.max(0.0));
        Ok(Self { covariance, eigen })
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> MatRef<'_, Complex64> {
        self.covariance.as_ref()
    }

    /// Eigendecomposition with negative round-off clamped to zero.
    pub fn eigen(&self) -> &HermitianEigen {
        &self.eigen
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ComplexVector {
        let m = self.dim();
        let z: Vec<Complex64> = (0..m).map(|_| complex_normal(rng, 1.0)).collect();
        let u = &self.eigen.vectors;
        // U diag(sqrt λ) z
        let scaled: Vec<Complex64> = z.iter().zip(&self.eigen.values).map(|(z, l)| z * l.sqrt()).collect();
        let out = (0..m).map(|i| (0..m).map(|k| u[(i, k)] * scaled[k]).sum()).collect();
        ComplexVector::from_vec_unchecked(out)
    }
}

/// Stationary covariance whose spectrum is flat over `bandwidth` (fraction of
/// the symbol rate) around `center` (cycles per sample), with unit diagonal.
pub fn narrowband_covariance(m: usize, bandwidth: f64, center: f64) -> Result<CMat> {
    if !(bandwidth > 0.0 && bandwidth <= 1.0) {
        return Err(Error::Config(format!("narrowband width must lie in (0, 1], got {bandwidth}")));
    }
    let sinc = |x: f64| if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    Ok(CMat::from_fn(m, m, |i, j| {
        let lag = i as f64 - j as f64;
        Complex64::from_polar(sinc(bandwidth * lag), 2.0 * PI * center * lag)
    }))
}

/// Structured interference source.
#[derive(Debug, Clone)]
pub enum InterferenceSpec {
    /// Unit-amplitude baseband chirp sweeping `bandwidth_hz` over `duration_s`.
    Lfm { bandwidth_hz: f64, duration_s: f64, symbol_rate_hz: f64 },
    GaussianProcess(GaussianProcess),
}

impl InterferenceSpec {
    /// 1 kHz chirp lasting 2 s, sampled at 4 kHz.
    pub fn default_lfm() -> Self {
        InterferenceSpec::Lfm { bandwidth_hz: 1e3, duration_s: 2.0, symbol_rate_hz: 4e3 }
    }
}

/// Draw a length-`m` interference realization.
///
/// LFM segments are cut at a uniformly random offset from
/// `exp(jπ(B/T)(τ - T/2)² + jφ₀)`, `τ = k / f_sym`, with `φ₀` uniform.
pub fn generate_interference<R: Rng + ?Sized>(spec: &InterferenceSpec, m: usize, rng: &mut R) -> Result<ComplexVector> {
    if m == 0 {
        return Err(Error::InvalidDimensions("interference length must be positive".into()));
    }
    match spec {
        InterferenceSpec::Lfm { bandwidth_hz, duration_s, symbol_rate_hz } => {
            let total = (duration_s * symbol_rate_hz).round() as usize;
            if m > total {
                return Err(Error::InvalidDimensions(format!(
                    "segment of {m} samples exceeds the {total}-sample chirp"
                )));
            }
            let start = rng.random_range(0..=total - m);
            let phi0 = rng.random_range(0.0..2.0 * PI);
            let rate = PI * bandwidth_hz / duration_s;
            let out = (start..start + m)
                .map(|k| {
                    let tau = k as f64 / symbol_rate_hz - 0.5 * duration_s;
                    Complex64::from_polar(1.0, rate * tau * tau + phi0)
                })
                .collect();
            ComplexVector::new(out)
        }
        InterferenceSpec::GaussianProcess(gp) => {
            if gp.dim() != m {
                return Err(Error::InvalidDimensions(format!(
                    "covariance is {0}x{0} but {m} samples were requested",
                    gp.dim()
                )));
            }
            Ok(gp.sample(rng))
        }
    }
}

/// Observation assembled by [`scale_and_mix`].
#[derive(Debug, Clone)]
pub struct Mixture {
    pub y: ComplexVector,
    pub sigma_y2: f64,
    pub n_scaled: ComplexVector,
    pub noise: ComplexVector,
    /// Factor applied to the raw interference.
    pub interference_scale: f64,
}

/// Scale `n` to hit `sir_db` exactly and add AWGN whose variance gives
/// `snr_db` in expectation. An infinite SIR drops the interference.
pub fn scale_and_mix<R: Rng + ?Sized>(
    ah: &ComplexVector,
    n: &ComplexVector,
    snr_db: f64,
    sir_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    if ah.len() != n.len() {
        return Err(Error::InvalidDimensions(format!("signal length {} != interference length {}", ah.len(), n.len())));
    }
    let signal_power = ah.norm_sqr();
    if signal_power == 0.0 {
        return Err(Error::DegenerateSignal("‖Ah‖ = 0; SNR and SIR are undefined".into()));
    }
    let interference_scale = if sir_db == f64::INFINITY {
        0.0
    } else {
        let np = n.norm_sqr();
        if np == 0.0 {
            return Err(Error::DegenerateSignal("interference has zero power".into()));
        }
        (signal_power / (np * 10f64.powf(sir_db / 10.0))).sqrt()
    };
    let m = ah.len();
    let sigma_y2 = if snr_db == f64::INFINITY { 0.0 } else { signal_power / (m as f64 * 10f64.powf(snr_db / 10.0)) };
    let n_scaled = n.scaled(interference_scale);
    let noise: Vec<Complex64> = (0..m).map(|_| complex_normal(rng, sigma_y2)).collect();
    let y = ah.iter().zip(n_scaled.iter()).zip(&noise).map(|((a, b), e)| a + b + e).collect();
    Ok(Mixture {
        y: ComplexVector::new(y)?,
        sigma_y2,
        n_scaled,
        noise: ComplexVector::from_vec_unchecked(noise),
        interference_scale,
    })
}
