//! Flat `key = value` configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are rejected so that typos do not silently fall back to
//! defaults. Command-line `--set key=value` pairs are applied on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::SblOptions;
use crate::bench::{BaselineConfig, ExperimentConfig, InterferenceKind, Method, Scenario};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMethod};
use crate::sampler::SamplerConfig;
use crate::score::VjpMode;
use crate::sde::VpSchedule;
use crate::signal::ChannelSpec;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("sde.beta_min", "lower end of the linear noise schedule"),
    ("sde.beta_max", "upper end of the linear noise schedule"),
    ("sde.steps", "number of reverse steps T (alias sampler.T)"),
    ("sampler.T", "number of reverse steps"),
    ("sampler.K", "ensemble size (alias guidance.K)"),
    ("sampler.nu", "corrector step scale"),
    ("sampler.rho", "initial gamma"),
    ("sampler.em", "EM updates of gamma on/off"),
    ("sampler.seed", "sampler seed (estimate only; bench derives per-trial seeds)"),
    ("sampler.corrector_steps", "Langevin iterations per step"),
    ("sampler.gamma_max", "upper clamp on EM gamma, inf disables"),
    ("sampler.denoise_final", "drop the noise of the last predictor step"),
    ("guidance.method", "dmps or pgdm"),
    ("guidance.mu", "channel prior weight"),
    ("guidance.kappa", "interference prior weight"),
    ("guidance.K", "ensemble size"),
    ("score.weights", "path to a .dmsc interference score network"),
    ("score.vjp", "fd or identity"),
    ("scenario.M", "observation length"),
    ("scenario.L", "channel length in taps"),
    ("scenario.p0", "number of propagation paths"),
    ("scenario.inter_arrival_mean_s", "mean path inter-arrival time"),
    ("scenario.decay_db", "power drop across decay_span_s"),
    ("scenario.decay_span_s", "delay span of the power decay"),
    ("scenario.symbol_rate_hz", "symbol rate"),
    ("scenario.interference", "lfm or gaussian"),
    ("scenario.lfm_bandwidth_hz", "LFM sweep bandwidth"),
    ("scenario.lfm_duration_s", "LFM duration"),
    ("scenario.gp_bandwidth", "Gaussian interference band, fraction of the symbol rate"),
    ("scenario.gp_center", "Gaussian interference band center, cycles per sample"),
    ("scenario.snr_db", "comma-separated SNR values"),
    ("scenario.sir_db", "comma-separated SIR values"),
    ("bench.methods", "comma-separated methods: dmsbl-dmps, dmsbl-pgdm, mmse, omp, sbl"),
    ("bench.trials", "trials per (SNR, SIR) cell"),
    ("bench.seed", "master seed"),
    ("bench.output", "report directory"),
    ("baseline.mmse_prior_var", "MMSE prior variance, default 1/L"),
    ("baseline.omp_sparsity", "OMP sparsity, default the true path count"),
    ("baseline.sbl_max_iters", "SBL iteration cap"),
    ("baseline.sbl_tol", "SBL relative tolerance"),
    ("baseline.sbl_learn_noise", "SBL noise variance learning on/off"),
];

const ALIASES: &[(&str, &str)] = &[("sde.steps", "sampler.T"), ("guidance.K", "sampler.K")];

/// Raw validated key/value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn canonical(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, c)| c)
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key '{key}'")))
    }
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then_some((k, v))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_pair(line)
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{raw}'", i + 1)))?;
            check_key(k).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            let c = canonical(k).to_string();
            if let Some((prev, at)) = seen.get(&c) {
                return Err(Error::Config(format!(
                    "line {}: '{k}' already set on line {at} (as '{prev}')",
                    i + 1
                )));
            }
            seen.insert(c.clone(), (k.to_string(), i + 1));
            cfg.values.insert(c, v.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Apply one `key=value` override; later overrides win.
    pub fn set(&mut self, pair: &str) -> Result<()> {
        let (k, v) = split_pair(pair).ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        check_key(k)?;
        self.values.insert(canonical(k).to_string(), v.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(canonical(key)).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "1" | "true" | "on" | "yes" => Ok(true),
                "0" | "false" | "off" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected on/off, got '{v}'"))),
            },
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        let items: Vec<T> = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse '{s}'"))))
            .collect::<Result<_>>()?;
        if items.is_empty() {
            return Err(Error::Config(format!("{key}: empty list")));
        }
        Ok(Some(items))
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let d = SamplerConfig::default();
        let schedule = VpSchedule::new(
            self.or("sde.beta_min", d.schedule.beta_min)?,
            self.or("sde.beta_max", d.schedule.beta_max)?,
            self.or("sampler.T", d.schedule.steps)?,
        )?;
        let method = match self.get("guidance.method") {
            Some(v) => v.parse::<GuidanceMethod>()?,
            None => d.guidance.method,
        };
        let guidance = GuidanceConfig {
            method,
            mu: self.or("guidance.mu", d.guidance.mu)?,
            kappa: self.or("guidance.kappa", d.guidance.kappa)?,
            k: self.or("sampler.K", d.guidance.k)?,
        };
        let cfg = SamplerConfig {
            schedule,
            guidance,
            nu: self.or("sampler.nu", d.nu)?,
            rho: self.or("sampler.rho", d.rho)?,
            em_enabled: self.flag("sampler.em", d.em_enabled)?,
            seed: self.or("sampler.seed", d.seed)?,
            corrector_steps: self.or("sampler.corrector_steps", d.corrector_steps)?,
            initial_gamma: None,
            gamma_max: self.or("sampler.gamma_max", d.gamma_max)?,
            denoise_final: self.flag("sampler.denoise_final", d.denoise_final)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let d = Scenario::default();
        let dc = &d.channel;
        let channel = ChannelSpec {
            paths: self.or("scenario.p0", dc.paths)?,
            taps: self.or("scenario.L", dc.taps)?,
            inter_arrival_mean_s: self.or("scenario.inter_arrival_mean_s", dc.inter_arrival_mean_s)?,
            decay_db: self.or("scenario.decay_db", dc.decay_db)?,
            decay_span_s: self.or("scenario.decay_span_s", dc.decay_span_s)?,
            symbol_rate_hz: self.or("scenario.symbol_rate_hz", dc.symbol_rate_hz)?,
            normalize: true,
        };
        let kind = self.get("scenario.interference").unwrap_or("lfm").to_ascii_lowercase();
        let interference = match kind.as_str() {
            "lfm" => InterferenceKind::Lfm {
                bandwidth_hz: self.or("scenario.lfm_bandwidth_hz", 1e3)?,
                duration_s: self.or("scenario.lfm_duration_s", 2.0)?,
            },
            "gaussian" | "gp" | "gaussian_process" => InterferenceKind::GaussianOracle {
                bandwidth: self.or("scenario.gp_bandwidth", 0.1)?,
                center: self.or("scenario.gp_center", 0.05)?,
            },
            other => {
                return Err(Error::Config(format!("scenario.interference: expected lfm or gaussian, got '{other}'")))
            }
        };
        let s = Scenario { channel, interference, measurements: self.or("scenario.M", d.measurements)? };
        s.validate()?;
        Ok(s)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        let sbl_d = SblOptions::default();
        let cfg = ExperimentConfig {
            scenario: self.scenario()?,
            snr_db: self.list("scenario.snr_db")?.unwrap_or(d.snr_db),
            sir_db: self.list("scenario.sir_db")?.unwrap_or(d.sir_db),
            methods: self.list::<Method>("bench.methods")?.unwrap_or(d.methods),
            trials: self.or("bench.trials", d.trials)?,
            seed: self.or("bench.seed", d.seed)?,
            output: self.get("bench.output").map(PathBuf::from),
            sampler: self.sampler()?,
            baselines: BaselineConfig {
                mmse_prior_var: self.parsed("baseline.mmse_prior_var")?,
                omp_sparsity: self.parsed("baseline.omp_sparsity")?,
                sbl: SblOptions {
                    max_iters: self.or("baseline.sbl_max_iters", sbl_d.max_iters)?,
                    tol: self.or("baseline.sbl_tol", sbl_d.tol)?,
                    learn_noise: self.flag("baseline.sbl_learn_noise", sbl_d.learn_noise)?,
                    initial_noise_var: None,
                },
            },
            weights: self.get("score.weights").map(PathBuf::from),
            vjp: self.or("score.vjp", VjpMode::default())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
