//! Monte-Carlo experiment runner: scenario generation, estimator dispatch,
//! NMSE aggregation and CSV emission.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{self, SblOptions};
use crate::error::{Error, Result};
use crate::guidance::GuidanceMethod;
use crate::sampler::{self, nmse_db, SamplerConfig};
use crate::score::{GaussianInterferencePrior, LearnedScore, ScoreProvider, VjpMode};
use crate::signal::{
    bpsk_pilot, generate_channel, generate_interference, narrowband_covariance, scale_and_mix, ChannelSpec,
    ComplexVector, GaussianProcess, InterferenceSpec, MeasurementModel, Mixture, PilotMatrix,
};

/// Estimator selectable in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    DmSbl(GuidanceKey),
    Mmse,
    Omp,
    Sbl,
}

/// Orderable stand-in for [`GuidanceMethod`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GuidanceKey {
    Dmps,
    Pgdm,
}

impl From<GuidanceKey> for GuidanceMethod {
    fn from(k: GuidanceKey) -> Self {
        match k {
            GuidanceKey::Dmps => GuidanceMethod::Dmps,
            GuidanceKey::Pgdm => GuidanceMethod::Pgdm,
        }
    }
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::DmSbl(GuidanceKey::Dmps), Method::DmSbl(GuidanceKey::Pgdm), Method::Mmse, Method::Omp, Method::Sbl];

    pub fn is_dmsbl(self) -> bool {
        matches!(self, Method::DmSbl(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::DmSbl(GuidanceKey::Dmps) => "dmsbl-dmps",
            Method::DmSbl(GuidanceKey::Pgdm) => "dmsbl-pgdm",
            Method::Mmse => "mmse",
            Method::Omp => "omp",
            Method::Sbl => "sbl",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Method::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::Config(format!("unknown method '{s}' (expected dmsbl-dmps, dmsbl-pgdm, mmse, omp or sbl)"))
        })
    }
}

/// Interference family of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum InterferenceKind {
    Lfm { bandwidth_hz: f64, duration_s: f64 },
    /// Narrowband Gaussian process with a sinc-shaped covariance; the sampler
    /// uses its exact score.
    GaussianOracle { bandwidth: f64, center: f64 },
}

impl InterferenceKind {
    pub fn name(&self) -> &'static str {
        match self {
            InterferenceKind::Lfm { .. } => "lfm",
            InterferenceKind::GaussianOracle { .. } => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub channel: ChannelSpec,
    pub interference: InterferenceKind,
    /// Observation length `M`; the pilot has `M + L - 1` symbols.
    pub measurements: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            channel: ChannelSpec::new(10, 200),
            interference: InterferenceKind::Lfm { bandwidth_hz: 1e3, duration_s: 2.0 },
            measurements: 200,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        if self.measurements == 0 {
            return Err(Error::Config("scenario.M must be positive".into()));
        }
        match self.interference {
            InterferenceKind::Lfm { bandwidth_hz, duration_s } => {
                if !(bandwidth_hz > 0.0 && duration_s > 0.0) {
                    return Err(Error::Config("LFM bandwidth and duration must be positive".into()));
                }
                let total = (duration_s * self.channel.symbol_rate_hz).round() as usize;
                if self.measurements > total {
                    return Err(Error::Config(format!(
                        "M = {} exceeds the {total}-sample LFM signal",
                        self.measurements
                    )));
                }
            }
            InterferenceKind::GaussianOracle { bandwidth, center } => {
                if !(bandwidth > 0.0 && bandwidth <= 1.0 && center.is_finite()) {
                    return Err(Error::Config(format!(
                        "Gaussian interference needs 0 < bandwidth <= 1, got {bandwidth}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Build the interference source once; the Gaussian case carries an
    /// `M × M` eigendecomposition worth sharing across trials.
    pub fn source(&self) -> Result<InterferenceSource> {
        self.validate()?;
        let spec = match self.interference {
            InterferenceKind::Lfm { bandwidth_hz, duration_s } => InterferenceSpec::Lfm {
                bandwidth_hz,
                duration_s,
                symbol_rate_hz: self.channel.symbol_rate_hz,
            },
            InterferenceKind::GaussianOracle { bandwidth, center } => InterferenceSpec::GaussianProcess(
                GaussianProcess::new(narrowband_covariance(self.measurements, bandwidth, center)?)?,
            ),
        };
        let prior = match &spec {
            InterferenceSpec::GaussianProcess(gp) => Some(GaussianInterferencePrior::from_process(gp)),
            InterferenceSpec::Lfm { .. } => None,
        };
        Ok(InterferenceSource { spec, prior })
    }
}

/// Shared, immutable interference generator plus its unit-scale prior.
#[derive(Debug, Clone)]
pub struct InterferenceSource {
    pub spec: InterferenceSpec,
    pub prior: Option<GaussianInterferencePrior>,
}

/// One generated estimation problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub h: ComplexVector,
    pub pilot: ComplexVector,
    pub mixture: Mixture,
    pub model: MeasurementModel,
    /// Ground-truth sparsity (nonzero taps after delay collisions).
    pub sparsity: usize,
}

impl Instance {
    /// Per-entry power of `n + ε`, the noise level an interference-blind
    /// estimator would be given at best.
    pub fn disturbance_power(&self) -> f64 {
        let m = self.mixture.y.len() as f64;
        self.mixture.n_scaled.iter().zip(self.mixture.noise.iter()).map(|(n, e)| (n + e).norm_sqr()).sum::<f64>() / m
    }
}

/// Draw channel, pilot, interference and noise, in that order, from `rng`.
pub fn generate_instance(
    scenario: &Scenario,
    source: &InterferenceSource,
    snr_db: f64,
    sir_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    let l = scenario.channel.taps;
    let m = scenario.measurements;
    let h = generate_channel(&scenario.channel, rng)?;
    let pilot = bpsk_pilot(m + l - 1, rng)?;
    let a = PilotMatrix::new(pilot.clone(), l)?;
    let n = generate_interference(&source.spec, m, rng)?;
    let ah = a.apply(&h)?;
    let mixture = scale_and_mix(&ah, &n, snr_db, sir_db, rng)?;
    let model = MeasurementModel::new(a, mixture.y.clone(), mixture.sigma_y2)?;
    let sparsity = h.iter().filter(|z| z.norm_sqr() > 0.0).count();
    Ok(Instance { h, pilot, mixture, model, sparsity })
}

/// Counter-based stream for one trial: the master seed picks the key and
/// `(cell, trial)` the stream, so every method sees the same instance.
pub fn trial_rng(master_seed: u64, cell: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((cell as u64) << 32) | trial as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// Prior variance for MMSE; `None` means `1 / L`.
    pub mmse_prior_var: Option<f64>,
    /// OMP sparsity; `None` uses the true number of nonzero taps.
    pub omp_sparsity: Option<usize>,
    pub sbl: SblOptions,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { mmse_prior_var: None, omp_sparsity: None, sbl: SblOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub snr_db: Vec<f64>,
    pub sir_db: Vec<f64>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub seed: u64,
    /// Report directory for [`emit_reports`].
    pub output: Option<PathBuf>,
    /// Sampler settings; the per-trial seed overrides `sampler.seed`.
    pub sampler: SamplerConfig,
    pub baselines: BaselineConfig,
    /// Learned interference score for LFM scenarios.
    pub weights: Option<PathBuf>,
    pub vjp: VjpMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            snr_db: vec![30.0],
            sir_db: vec![5.0],
            methods: Method::ALL.to_vec(),
            trials: 50,
            seed: 0,
            output: None,
            sampler: SamplerConfig::default(),
            baselines: BaselineConfig::default(),
            weights: None,
            vjp: VjpMode::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("bench.trials must be >= 1".into()));
        }
        if self.snr_db.is_empty() || self.sir_db.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("SNR list, SIR list and method list must be nonempty".into()));
        }
        if self.snr_db.iter().chain(&self.sir_db).any(|v| v.is_nan()) {
            return Err(Error::Config("SNR/SIR values must not be NaN".into()));
        }
        if self.methods.iter().any(|m| m.is_dmsbl()) {
            self.sampler.validate()?;
        }
        Ok(())
    }

    /// `(snr, sir)` cells in row-major order over the SNR list.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.snr_db.iter().flat_map(|&s| self.sir_db.iter().map(move |&i| (s, i))).collect()
    }
}

/// Score provider for the interference branch. `None` means the scenario
/// provides an analytic prior per instance.
pub fn load_learned_score(cfg: &ExperimentConfig) -> Result<Option<Arc<LearnedScore>>> {
    let needs = cfg.methods.iter().any(|m| m.is_dmsbl()) && cfg.scenario.interference.name() == "lfm";
    if !needs {
        return Ok(None);
    }
    let path = cfg.weights.as_ref().ok_or_else(|| {
        Error::Config(
            "DM-SBL on LFM interference needs a learned score: set score.weights to a .dmsc file".into(),
        )
    })?;
    if !path.exists() {
        return Err(Error::io(
            format!("learned score weights not found at expected path {}", path.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    Ok(Some(Arc::new(LearnedScore::load(path, cfg.vjp)?)))
}

/// Run one method on one instance and return `ĥ`.
pub fn estimate(
    method: Method,
    inst: &Instance,
    cfg: &ExperimentConfig,
    source: &InterferenceSource,
    learned: Option<&LearnedScore>,
    sampler_seed: u64,
) -> Result<ComplexVector> {
    let l = inst.model.taps();
    match method {
        Method::DmSbl(g) => {
            let mut scfg = cfg.sampler.clone();
            scfg.guidance.method = g.into();
            scfg.seed = sampler_seed;
            let scaled;
            let provider: &dyn ScoreProvider = match (&source.prior, learned) {
                (Some(prior), _) => {
                    scaled = prior.scaled(inst.mixture.interference_scale);
                    &scaled
                }
                (None, Some(net)) => net,
                (None, None) => return Err(Error::Config("no interference score available for DM-SBL".into())),
            };
            Ok(sampler::run(&inst.model, &scfg, provider, Some(inst.h.as_slice()))?.h_hat)
        }
        Method::Mmse => {
            let p = cfg.baselines.mmse_prior_var.unwrap_or(1.0 / l as f64);
            let noise = inst.disturbance_power().max(f64::MIN_POSITIVE);
            Ok(baselines::mmse_estimate(&inst.model, p, noise)?.h_hat)
        }
        Method::Omp => {
            let k = cfg.baselines.omp_sparsity.unwrap_or(inst.sparsity).clamp(1, inst.model.measurements().min(l));
            Ok(baselines::omp_estimate(&inst.model, k)?.h_hat)
        }
        Method::Sbl => Ok(baselines::sbl_estimate(&inst.model, &cfg.baselines.sbl)?.h_hat),
    }
}

/// One trial-level result row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub snr_db: f64,
    pub sir_db: f64,
    pub trial: usize,
    pub method: Method,
    pub nmse_db: f64,
}

/// Run every `(snr, sir, trial, method)` combination. Trials run in parallel;
/// rows come back in deterministic `(cell, trial, method)` order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let source = cfg.scenario.source()?;
    let learned = load_learned_score(cfg)?;
    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..cfg.trials).map(move |t| (c, t))).collect();
    let started = Instant::now();
    let per_job: Vec<Result<Vec<TrialResult>>> = jobs
        .par_iter()
        .map(|&(cell, trial)| {
            let (snr_db, sir_db) = cells[cell];
            let mut rng = trial_rng(cfg.seed, cell, trial);
            let inst = generate_instance(&cfg.scenario, &source, snr_db, sir_db, &mut rng)?;
            let sampler_seed = rng.random::<u64>();
            cfg.methods
                .iter()
                .map(|&method| {
                    let h_hat = estimate(method, &inst, cfg, &source, learned.as_deref(), sampler_seed)?;
                    let nmse = nmse_db(h_hat.as_slice(), inst.h.as_slice());
                    log::debug!("snr {snr_db} sir {sir_db} trial {trial} {method}: {nmse:.2} dB");
                    Ok(TrialResult { snr_db, sir_db, trial, method, nmse_db: nmse })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len() * cfg.methods.len());
    for r in per_job {
        rows.extend(r?);
    }
    log::info!("{} trials x {} methods in {:.1?}", jobs.len(), cfg.methods.len(), started.elapsed());
    Ok(rows)
}

/// Cell-level statistics of NMSE in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub snr_db: f64,
    pub sir_db: f64,
    pub method: Method,
    pub trials: usize,
    pub mean_db: f64,
    pub median_db: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single trial.
    pub std_db: f64,
}

fn cell_key(snr: f64, sir: f64) -> (u64, u64) {
    (snr.to_bits(), sir.to_bits())
}

pub fn summarize(results: &[TrialResult]) -> Vec<SummaryRow> {
    // preserve first-appearance order of cells and methods
    let mut order: Vec<((u64, u64), Method)> = Vec::new();
    let mut groups: BTreeMap<((u64, u64), Method), Vec<f64>> = BTreeMap::new();
    for r in results {
        let key = (cell_key(r.snr_db, r.sir_db), r.method);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r.nmse_db);
    }
    order
        .into_iter()
        .map(|key| {
            let mut v = groups.remove(&key).unwrap_or_default();
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            v.sort_by(f64::total_cmp);
            let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            SummaryRow {
                snr_db: f64::from_bits(key.0 .0),
                sir_db: f64::from_bits(key.0 .1),
                method: key.1,
                trials: n,
                mean_db: mean,
                median_db: median,
                std_db: std,
            }
        })
        .collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::format("csv", format!("{}: {other:?}", path.display())),
    }
}

/// `{}` on `f64` prints the shortest string that parses back to the same bits.
fn f(x: f64) -> String {
    x.to_string()
}

pub fn write_results(path: &Path, results: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["snr_db", "sir_db", "trial", "method", "nmse_db"]).map_err(csv_err(path))?;
    for r in results {
        w.write_record([f(r.snr_db), f(r.sir_db), r.trial.to_string(), r.method.to_string(), f(r.nmse_db)])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_results(path: &Path) -> Result<Vec<TrialResult>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("reading {}", path.display()), io),
        other => Error::format("csv", format!("{other:?}")),
    })?;
    let bad = |what: &str| Error::format("csv", format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::format("csv", format!("{}: {e}", path.display())))?;
        if rec.len() != 5 {
            return Err(bad("column count"));
        }
        let num = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(what));
        out.push(TrialResult {
            snr_db: num(0, "snr_db")?,
            sir_db: num(1, "sir_db")?,
            trial: rec[2].parse().map_err(|_| bad("trial"))?,
            method: rec[3].parse().map_err(|_| bad("method"))?,
            nmse_db: num(4, "nmse_db")?,
        });
    }
    Ok(out)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["snr_db", "sir_db", "method", "trials", "mean_db", "median_db", "std_db"])
        .map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            f(r.snr_db),
            f(r.sir_db),
            r.method.to_string(),
            r.trials.to_string(),
            f(r.mean_db),
            f(r.median_db),
            f(r.std_db),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// File name of the NMSE-vs-SNR table for one SIR value.
pub fn plotdata_name(sir_db: f64) -> String {
    format!("nmse_vs_snr_sir_{}.csv", f(sir_db))
}

/// Write `results.csv`, `summary.csv` and `plotdata/nmse_vs_snr_sir_<SIR>.csv`
/// (one row per SNR, one mean-NMSE column per method) under `dir`.
pub fn emit_reports(dir: &Path, results: &[TrialResult]) -> Result<Vec<SummaryRow>> {
    if results.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    let plot_dir = dir.join("plotdata");
    std::fs::create_dir_all(&plot_dir).map_err(|e| Error::io(format!("creating {}", plot_dir.display()), e))?;
    write_results(&dir.join("results.csv"), results)?;
    let summary = summarize(results);
    write_summary(&dir.join("summary.csv"), &summary)?;

    let mut methods: Vec<Method> = Vec::new();
    let mut sirs: Vec<f64> = Vec::new();
    for r in &summary {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !sirs.iter().any(|s| s.to_bits() == r.sir_db.to_bits()) {
            sirs.push(r.sir_db);
        }
    }
    for sir in sirs {
        let path = plot_dir.join(plotdata_name(sir));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        let mut header = vec!["snr_db".to_string()];
        header.extend(methods.iter().map(|m| m.to_string()));
        w.write_record(&header).map_err(csv_err(&path))?;
        let mut snrs: Vec<f64> = Vec::new();
        for r in summary.iter().filter(|r| r.sir_db.to_bits() == sir.to_bits()) {
            if !snrs.iter().any(|s| s.to_bits() == r.snr_db.to_bits()) {
                snrs.push(r.snr_db);
            }
        }
        for snr in snrs {
            let mut row = vec![f(snr)];
            for m in &methods {
                let v = summary
                    .iter()
                    .find(|r| r.method == *m && cell_key(r.snr_db, r.sir_db) == cell_key(snr, sir))
                    .map_or(String::new(), |r| f(r.mean_db));
                row.push(v);
            }
            w.write_record(&row).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(summary)
}

/// Mean NMSE in dB per method over a result set.
pub fn mean_by_method(results: &[TrialResult]) -> BTreeMap<Method, f64> {
    let mut acc: BTreeMap<Method, (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry(r.method).or_insert((0.0, 0));
        e.0 += r.nmse_db;
        e.1 += 1;
    }
    acc.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}
