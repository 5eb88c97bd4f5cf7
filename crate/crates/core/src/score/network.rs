//! Learned interference score: a fully convolutional network read from a
//! `.dmsc` weight file.
//!
//! Layout (little-endian): magic `"DMSC"`, `u32` version = 1, `u32` layer
//! count, then per layer `u8` kind, `u32` in_ch, `u32` out_ch, `u32` kernel,
//! `u32` padding, the `f32` weights row-major and the `f32` biases.
//!
//! Layers before the first convolution form the time MLP. They act on a
//! sinusoidal embedding of `t` whose width is the `in_ch` of the first
//! dense layer (or of the first time-bias layer when the MLP is empty).
//! After that, each time-bias layer adds a dense projection of the MLP
//! output to every position of its channel.

use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{finite_difference_vjp, ScoreProvider};
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::sde::DiffusionTime;

pub const DMSC_MAGIC: &[u8; 4] = b"DMSC";
pub const DMSC_VERSION: u32 = 1;
/// `t` is multiplied by this before the sinusoids.
pub const TIME_EMBED_SCALE: f64 = 1000.0;
pub const TIME_EMBED_MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d,
    Relu,
    SkipBegin,
    SkipEnd,
    TimeBias,
    Dense,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv1d => 0,
            LayerKind::Relu => 1,
            LayerKind::SkipBegin => 2,
            LayerKind::SkipEnd => 3,
            LayerKind::TimeBias => 4,
            LayerKind::Dense => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv1d,
            1 => LayerKind::Relu,
            2 => LayerKind::SkipBegin,
            3 => LayerKind::SkipEnd,
            4 => LayerKind::TimeBias,
            5 => LayerKind::Dense,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `[out][in][kernel]` for convolutions, `[out][in]` for dense layers.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerSpec {
    fn param_counts(kind: LayerKind, in_ch: usize, out_ch: usize, kernel: usize) -> (usize, usize) {
        match kind {
            LayerKind::Conv1d => (out_ch * in_ch * kernel, out_ch),
            LayerKind::Dense | LayerKind::TimeBias => (out_ch * in_ch, out_ch),
            _ => (0, 0),
        }
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, weights: Vec<f64>, biases: Vec<f64>) -> Self {
        Self { kind: LayerKind::Conv1d, in_ch, out_ch, kernel, padding: kernel.saturating_sub(1) / 2, weights, biases }
    }

    pub fn dense(in_ch: usize, out_ch: usize, weights: Vec<f64>, biases: Vec<f64>) -> Self {
        Self { kind: LayerKind::Dense, in_ch, out_ch, kernel: 1, padding: 0, weights, biases }
    }

    pub fn time_bias(in_ch: usize, out_ch: usize, weights: Vec<f64>, biases: Vec<f64>) -> Self {
        Self { kind: LayerKind::TimeBias, in_ch, out_ch, kernel: 1, padding: 0, weights, biases }
    }

    pub fn relu(ch: usize) -> Self {
        Self::plain(LayerKind::Relu, ch, ch)
    }

    pub fn skip_begin(ch: usize) -> Self {
        Self::plain(LayerKind::SkipBegin, ch, ch)
    }

    pub fn skip_end(in_ch: usize, out_ch: usize) -> Self {
        Self::plain(LayerKind::SkipEnd, in_ch, out_ch)
    }

    fn plain(kind: LayerKind, in_ch: usize, out_ch: usize) -> Self {
        Self { kind, in_ch, out_ch, kernel: 0, padding: 0, weights: Vec::new(), biases: Vec::new() }
    }
}

/// Shape of the U-Net style builder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnetConfig {
    pub channels: usize,
    /// Blocks on each of the encoder and decoder side.
    pub blocks: usize,
    pub kernel: usize,
    pub embed_dim: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { channels: 64, blocks: 32, kernel: 3, embed_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    layers: Vec<LayerSpec>,
    /// Index of the first convolution; earlier layers form the time MLP.
    body_start: usize,
    embed_dim: usize,
}

fn fail(reason: impl Into<String>) -> Error {
    Error::format("dmsc", reason)
}

impl ScoreNetwork {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(fail("network has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            let (nw, nb) = LayerSpec::param_counts(l.kind, l.in_ch, l.out_ch, l.kernel);
            if l.weights.len() != nw || l.biases.len() != nb {
                return Err(fail(format!(
                    "layer {i} ({:?}) holds {}+{} parameters, shape needs {nw}+{nb}",
                    l.kind,
                    l.weights.len(),
                    l.biases.len()
                )));
            }
            if l.weights.iter().chain(&l.biases).any(|w| !w.is_finite()) {
                return Err(fail(format!("layer {i} has non-finite parameters")));
            }
        }
        let body_start = layers
            .iter()
            .position(|l| l.kind == LayerKind::Conv1d)
            .ok_or_else(|| fail("network has no convolution"))?;

        // time MLP
        let mut time_ch: Option<usize> = None;
        for (i, l) in layers[..body_start].iter().enumerate() {
            match l.kind {
                LayerKind::Dense => {
                    if let Some(c) = time_ch {
                        if c != l.in_ch {
                            return Err(fail(format!("layer {i}: dense expects {} inputs, got {c}", l.in_ch)));
                        }
                    }
                    time_ch = Some(l.out_ch);
                }
                LayerKind::Relu => {
                    if time_ch.is_none() || l.in_ch != l.out_ch || Some(l.in_ch) != time_ch {
                        return Err(fail(format!("layer {i}: relu in the time MLP has bad shape")));
                    }
                }
                k => return Err(fail(format!("layer {i}: {k:?} before the first convolution"))),
            }
        }
        let first_bias = layers.iter().find(|l| l.kind == LayerKind::TimeBias);
        let embed_dim = match (layers[..body_start].first(), first_bias) {
            (Some(first), _) => first.in_ch,
            (None, Some(tb)) => tb.in_ch,
            (None, None) => 0,
        };
        if embed_dim % 2 != 0 {
            return Err(fail(format!("time embedding width {embed_dim} must be even")));
        }
        let time_ch = time_ch.unwrap_or(embed_dim);

        // feature body
        let mut ch = 2usize;
        let mut stack: Vec<usize> = Vec::new();
        for (i, l) in layers.iter().enumerate().skip(body_start) {
            match l.kind {
                LayerKind::Conv1d => {
                    if l.in_ch != ch {
                        return Err(fail(format!("layer {i}: conv expects {} channels, got {ch}", l.in_ch)));
                    }
                    if l.kernel == 0 || l.kernel % 2 == 0 || l.padding != (l.kernel - 1) / 2 {
                        return Err(fail(format!(
                            "layer {i}: conv kernel {} with padding {} does not preserve length",
                            l.kernel, l.padding
                        )));
                    }
                    ch = l.out_ch;
                }
                LayerKind::Relu | LayerKind::SkipBegin => {
                    if l.in_ch != ch || l.out_ch != ch {
                        return Err(fail(format!("layer {i}: {:?} shape does not match {ch} channels", l.kind)));
                    }
                    if l.kind == LayerKind::SkipBegin {
                        stack.push(ch);
                    }
                }
                LayerKind::SkipEnd => {
                    let skip = stack.pop().ok_or_else(|| fail(format!("layer {i}: skip-end without skip-begin")))?;
                    if l.in_ch != ch {
                        return Err(fail(format!("layer {i}: skip-end expects {} channels, got {ch}", l.in_ch)));
                    }
                    let adds = l.out_ch == ch && skip == ch;
                    if !adds && l.out_ch != ch + skip {
                        return Err(fail(format!("layer {i}: skip-end output {} fits neither add nor concat", l.out_ch)));
                    }
                    ch = l.out_ch;
                }
                LayerKind::TimeBias => {
                    if l.in_ch != time_ch || l.out_ch != ch {
                        return Err(fail(format!(
                            "layer {i}: time-bias is {}->{}, features need {time_ch}->{ch}",
                            l.in_ch, l.out_ch
                        )));
                    }
                }
                LayerKind::Dense => return Err(fail(format!("layer {i}: dense layer after the first convolution"))),
            }
        }
        if !stack.is_empty() {
            return Err(fail(format!("{} unmatched skip-begin layers", stack.len())));
        }
        if ch != 2 {
            return Err(fail(format!("network ends with {ch} channels, need 2")));
        }
        Ok(Self { layers, body_start, embed_dim })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// U-Net style stack with resolution-preserving blocks. Weights use
    /// He-normal initialization.
    pub fn unet<R: Rng + ?Sized>(cfg: UnetConfig, rng: &mut R) -> Result<Self> {
        let UnetConfig { channels: c, blocks, kernel: k, embed_dim: e } = cfg;
        let mut init = |fan_in: usize, n: usize| -> Vec<f64> {
            let s = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut layers = vec![
            LayerSpec::dense(e, e, init(e, e * e), vec![0.0; e]),
            LayerSpec::relu(e),
            LayerSpec::dense(e, e, init(e, e * e), vec![0.0; e]),
            LayerSpec::conv(2, c, k, init(2 * k, c * 2 * k), vec![0.0; c]),
        ];
        for _ in 0..blocks {
            layers.push(LayerSpec::conv(c, c, k, init(c * k, c * c * k), vec![0.0; c]));
            layers.push(LayerSpec::time_bias(e, c, init(e, c * e), vec![0.0; c]));
            layers.push(LayerSpec::relu(c));
            layers.push(LayerSpec::skip_begin(c));
        }
        for _ in 0..blocks {
            layers.push(LayerSpec::skip_end(c, 2 * c));
            layers.push(LayerSpec::conv(2 * c, c, k, init(2 * c * k, c * 2 * c * k), vec![0.0; c]));
            layers.push(LayerSpec::time_bias(e, c, init(e, c * e), vec![0.0; c]));
            layers.push(LayerSpec::relu(c));
        }
        layers.push(LayerSpec::conv(c, 2, k, init(c * k, 2 * c * k), vec![0.0; 2]));
        Self::new(layers)
    }

    /// Zero the final projection so the network outputs zero everywhere.
    pub fn zero_final_projection(&mut self) {
        if let Some(last) = self.layers.iter_mut().rev().find(|l| l.kind == LayerKind::Conv1d) {
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.biases.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    fn time_features(&self, t: f64) -> Vec<f64> {
        let half = self.embed_dim / 2;
        let mut x: Vec<f64> = (0..half)
            .map(|k| {
                let f = (-(TIME_EMBED_MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
                (TIME_EMBED_SCALE * t * f).sin()
            })
            .collect();
        for k in 0..half {
            let f = (-(TIME_EMBED_MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
            x.push((TIME_EMBED_SCALE * t * f).cos());
        }
        for l in &self.layers[..self.body_start] {
            x = match l.kind {
                LayerKind::Dense => dense(l, &x),
                _ => x.into_iter().map(|v| v.max(0.0)).collect(),
            };
        }
        x
    }

    /// Forward pass on one signal. The output has the input's length.
    pub fn forward(&self, x: &[Complex64], t: f64) -> Result<Vec<Complex64>> {
        let temb = self.time_features(t);
        self.forward_with(x, &temb)
    }

    fn forward_with(&self, x: &[Complex64], temb: &[f64]) -> Result<Vec<Complex64>> {
        let m = x.len();
        let mut feat = Mat::<f64>::from_fn(2, m, |c, i| if c == 0 { x[i].re } else { x[i].im });
        let mut stack: Vec<Mat<f64>> = Vec::new();
        for (idx, l) in self.layers.iter().enumerate().skip(self.body_start) {
            match l.kind {
                LayerKind::Conv1d => feat = conv1d(l, feat.as_ref()),
                LayerKind::Relu => {
                    for j in 0..m {
                        for v in feat.col_as_slice_mut(j) {
                            *v = v.max(0.0);
                        }
                    }
                }
                LayerKind::SkipBegin => stack.push(feat.clone()),
                LayerKind::SkipEnd => {
                    let skip = stack.pop().expect("validated skip structure");
                    if l.out_ch == l.in_ch {
                        feat += &skip;
                    } else {
                        let c = feat.nrows();
                        feat = Mat::from_fn(l.out_ch, m, |r, j| if r < c { feat[(r, j)] } else { skip[(r - c, j)] });
                    }
                }
                LayerKind::TimeBias => {
                    let b = dense(l, temb);
                    for j in 0..m {
                        for (v, bb) in feat.col_as_slice_mut(j).iter_mut().zip(&b) {
                            *v += bb;
                        }
                    }
                }
                LayerKind::Dense => unreachable!("validated"),
            }
            if (0..m).any(|j| feat.col_as_slice(j).iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("non-finite activation after layer {idx} ({:?})", l.kind)));
            }
        }
        Ok((0..m).map(|i| Complex64::new(feat[(0, i)], feat[(1, i)])).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DMSC_MAGIC);
        out.extend_from_slice(&DMSC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.push(l.kind.code());
            for v in [l.in_ch, l.out_ch, l.kernel, l.padding] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for w in l.weights.iter().chain(&l.biases) {
                out.extend_from_slice(&(*w as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DMSC_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = r.u32()?;
        if version != DMSC_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(4096));
        for i in 0..n {
            let code = r.take(1)?[0];
            let kind = LayerKind::from_code(code).ok_or_else(|| fail(format!("layer {i}: unknown kind {code}")))?;
            let (in_ch, out_ch, kernel, padding) =
                (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let (nw, nb) = LayerSpec::param_counts(kind, in_ch, out_ch, kernel);
            let weights = r.f32s(nw)?;
            let biases = r.f32s(nb)?;
            layers.push(LayerSpec { kind, in_ch, out_ch, kernel, padding, weights, biases });
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading score weight file {}", path.display()), e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fail("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| fail("parameter count overflows"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

fn dense(l: &LayerSpec, x: &[f64]) -> Vec<f64> {
    (0..l.out_ch)
        .map(|o| l.biases[o] + l.weights[o * l.in_ch..(o + 1) * l.in_ch].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Length-preserving convolution as one GEMM over an im2col patch matrix.
fn conv1d(l: &LayerSpec, x: MatRef<'_, f64>) -> Mat<f64> {
    let (cin, m, k, pad) = (l.in_ch, x.ncols(), l.kernel, l.padding);
    let patches = Mat::<f64>::from_fn(cin * k, m, |r, j| {
        let (c, tap) = (r / k, r % k);
        let src = j as isize + tap as isize - pad as isize;
        if src < 0 || src >= m as isize {
            0.0
        } else {
            x[(c, src as usize)]
        }
    });
    let w = MatRef::from_row_major_slice(&l.weights, l.out_ch, cin * k);
    let mut out = Mat::<f64>::from_fn(l.out_ch, m, |o, _| l.biases[o]);
    matmul(out.as_mut(), Accum::Add, w, patches.as_ref(), 1.0, Par::Seq);
    out
}

/// How the learned provider forms the Tweedie vector-Jacobian product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VjpMode {
    #[default]
    FiniteDifference,
    /// `v / α`, ignoring the score's own Jacobian.
    Identity,
}

impl std::str::FromStr for VjpMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fd" | "finite-difference" | "finite_difference" => Ok(VjpMode::FiniteDifference),
            "identity" => Ok(VjpMode::Identity),
            other => Err(Error::Config(format!("unknown vjp mode '{other}' (expected fd or identity)"))),
        }
    }
}

impl std::fmt::Display for VjpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VjpMode::FiniteDifference => "fd",
            VjpMode::Identity => "identity",
        })
    }
}

/// Score provider backed by a [`ScoreNetwork`].
#[derive(Debug, Clone)]
pub struct LearnedScore {
    pub network: ScoreNetwork,
    pub vjp: VjpMode,
}

impl LearnedScore {
    pub fn new(network: ScoreNetwork, vjp: VjpMode) -> Self {
        Self { network, vjp }
    }

    pub fn load(path: impl AsRef<Path>, vjp: VjpMode) -> Result<Self> {
        Ok(Self::new(ScoreNetwork::load(path)?, vjp))
    }
}

impl ScoreProvider for LearnedScore {
    fn score_batch(&self, x: MatRef<'_, Complex64>, time: DiffusionTime) -> Result<CMat> {
        let temb = self.network.time_features(time.t);
        let cols: Vec<Vec<Complex64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| {
                let col: Vec<Complex64> = (0..x.nrows()).map(|i| x[(i, j)]).collect();
                self.network.forward_with(&col, &temb)
            })
            .collect::<Result<_>>()?;
        Ok(CMat::from_fn(x.nrows(), x.ncols(), |i, j| cols[j][i]))
    }

    fn tweedie_vjp_batch(
        &self,
        v: MatRef<'_, Complex64>,
        x: MatRef<'_, Complex64>,
        time: DiffusionTime,
    ) -> Result<CMat> {
        match self.vjp {
            VjpMode::FiniteDifference => finite_difference_vjp(self, v, x, time),
            VjpMode::Identity => {
                let a = time.safe_alpha();
                Ok(CMat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / a))
            }
        }
    }
}
