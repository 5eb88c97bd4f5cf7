//! Measurement model `y = A h + n + ε` and the scenario generators.

mod cbin;
mod generators;

use std::ops::Deref;
use std::sync::OnceLock;

use faer::MatRef;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};

pub use cbin::{decode_cbin, encode_cbin, read_cbin, write_cbin, CBIN_MAGIC, CBIN_VERSION};
pub use generators::{
    bpsk_pilot, draw_paths, generate_channel, generate_interference, narrowband_covariance, scale_and_mix,
    ChannelSpec, GaussianProcess, InterferenceSpec, Mixture, PathTap,
};

/// Non-empty vector of finite complex baseband samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector(Vec<Complex64>);

impl ComplexVector {
    pub fn new(values: Vec<Complex64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDimensions("complex vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Numeric(format!("non-finite entry at index {i}")));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_vec_unchecked(values: Vec<Complex64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "complex vector must be non-empty");
        Self(vec![Complex64::new(0.0, 0.0); len])
    }

    pub fn from_real(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|z| z * s).collect())
    }

    pub fn to_column(&self) -> CMat {
        linalg::from_column(&self.0)
    }
}

impl Deref for ComplexVector {
    type Target = [Complex64];

    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

/// The `M × L` Toeplitz pilot operator with entry `(m, l) = pilot[L-1+m-l]`.
///
/// Applying it to a channel is the valid part of the linear convolution of the
/// pilot with the channel taps.
#[derive(Debug)]
pub struct PilotMatrix {
    pilot: ComplexVector,
    taps: usize,
    dense: CMat,
    gram: OnceLock<CMat>,
}

impl Clone for PilotMatrix {
    fn clone(&self) -> Self {
        Self { pilot: self.pilot.clone(), taps: self.taps, dense: self.dense.clone(), gram: OnceLock::new() }
    }
}

impl PilotMatrix {
    pub fn new(pilot: ComplexVector, taps: usize) -> Result<Self> {
        let n = pilot.len();
        if taps == 0 || n < taps {
            return Err(Error::InvalidDimensions(format!(
                "pilot length {n} must be at least the channel length {taps} (and L >= 1)"
            )));
        }
        let rows = n - taps + 1;
        let dense = CMat::from_fn(rows, taps, |m, l| pilot[taps - 1 + m - l]);
        Ok(Self { pilot, taps, dense, gram: OnceLock::new() })
    }

    /// Number of measurements `M = N - L + 1`.
    pub fn rows(&self) -> usize {
        self.dense.nrows()
    }

    /// Channel length `L`.
    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn pilot(&self) -> &ComplexVector {
        &self.pilot
    }

    pub fn entry(&self, m: usize, l: usize) -> Complex64 {
        self.pilot[self.taps - 1 + m - l]
    }

    pub fn dense(&self) -> MatRef<'_, Complex64> {
        self.dense.as_ref()
    }

    pub fn apply(&self, h: &[Complex64]) -> Result<ComplexVector> {
        if h.len() != self.taps {
            return Err(Error::InvalidDimensions(format!("channel length {} != L = {}", h.len(), self.taps)));
        }
        let out = (0..self.rows())
            .map(|m| (0..self.taps).map(|l| self.entry(m, l) * h[l]).sum())
            .collect();
        Ok(ComplexVector::from_vec_unchecked(out))
    }

    pub fn apply_adjoint(&self, v: &[Complex64]) -> Result<ComplexVector> {
        if v.len() != self.rows() {
            return Err(Error::InvalidDimensions(format!("vector length {} != M = {}", v.len(), self.rows())));
        }
        let out = (0..self.taps)
            .map(|l| (0..self.rows()).map(|m| self.entry(m, l).conj() * v[m]).sum())
            .collect();
        Ok(ComplexVector::from_vec_unchecked(out))
    }

    /// `A X` for a batch of channel columns.
    pub fn apply_batch(&self, x: MatRef<'_, Complex64>) -> CMat {
        linalg::mul(self.dense.as_ref(), x)
    }

    /// `Aᴴ X` for a batch of measurement-space columns.
    pub fn adjoint_batch(&self, x: MatRef<'_, Complex64>) -> CMat {
        linalg::mul_adjoint(self.dense.as_ref(), x)
    }

    /// `A Aᴴ` (M × M), computed once.
    pub fn gram(&self) -> &CMat {
        self.gram.get_or_init(|| linalg::mul_by_adjoint(self.dense.as_ref(), self.dense.as_ref()))
    }
}

/// Pilot operator, observation and AWGN variance of one estimation problem.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    pub a: PilotMatrix,
    pub y: ComplexVector,
    pub sigma_y2: f64,
}

impl MeasurementModel {
    pub fn new(a: PilotMatrix, y: ComplexVector, sigma_y2: f64) -> Result<Self> {
        if y.len() != a.rows() {
            return Err(Error::InvalidDimensions(format!("observation length {} != M = {}", y.len(), a.rows())));
        }
        if !(sigma_y2.is_finite() && sigma_y2 >= 0.0) {
            return Err(Error::Domain(format!("noise variance must be finite and >= 0, got {sigma_y2}")));
        }
        Ok(Self { a, y, sigma_y2 })
    }

    pub fn measurements(&self) -> usize {
        self.a.rows()
    }

    pub fn taps(&self) -> usize {
        self.a.taps()
    }
}
