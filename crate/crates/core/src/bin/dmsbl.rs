use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmsbl::bench::{self, ExperimentConfig, Instance, Method};
use dmsbl::config::{Config, KEYS};
use dmsbl::sampler::nmse_db;
use dmsbl::signal::{generate_interference, read_cbin, write_cbin, MeasurementModel, Mixture, PilotMatrix};
use dmsbl::{ComplexVector, Error, Result};

#[derive(Parser)]
#[command(name = "dmsbl", version, about = "Sparse channel estimation under structured interference")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set sampler.K=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write one scenario instance as .cbin files plus meta.txt.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
        sir_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate one channel and print its NMSE.
    Estimate {
        /// Directory written by `generate`; a fresh instance is drawn when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "dmsbl-pgdm")]
        method: Method,
        #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
        sir_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the estimate as .cbin.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Monte-Carlo sweep and write results.csv, summary.csv and plotdata/.
    Bench {
        /// Report directory (overrides bench.output).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write raw interference segments `seg_NNNNN.cbin` for score training.
    ExportInterferenceDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Segment length; defaults to scenario.M.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the accepted configuration keys.
    Keys,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn io_ctx(what: String) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::io(what, e)
}

fn write_meta(path: &Path, inst: &Instance, snr_db: f64, sir_db: f64, seed: u64) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "snr_db = {snr_db}");
    let _ = writeln!(s, "sir_db = {sir_db}");
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "taps = {}", inst.h.len());
    let _ = writeln!(s, "sigma_y2 = {}", inst.mixture.sigma_y2);
    let _ = writeln!(s, "interference_scale = {}", inst.mixture.interference_scale);
    std::fs::write(path, s).map_err(io_ctx(format!("writing {}", path.display())))
}

fn read_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(io_ctx(format!("reading {}", path.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn meta_num(meta: &[(String, String)], key: &str, path: &Path) -> Result<f64> {
    meta.iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: missing or bad '{key}'", path.display())))
}

fn load_instance(dir: &Path) -> Result<Instance> {
    let meta_path = dir.join("meta.txt");
    let meta = read_meta(&meta_path)?;
    let taps = meta_num(&meta, "taps", &meta_path)? as usize;
    let pilot = read_cbin(dir.join("pilot.cbin"))?;
    let h = read_cbin(dir.join("channel.cbin"))?;
    let y = read_cbin(dir.join("y.cbin"))?;
    let n_scaled = read_cbin(dir.join("interference.cbin"))?;
    let noise = read_cbin(dir.join("noise.cbin"))?;
    if h.len() != taps {
        return Err(Error::InvalidDimensions(format!("channel.cbin has {} taps, meta says {taps}", h.len())));
    }
    let mixture = Mixture {
        y: y.clone(),
        sigma_y2: meta_num(&meta, "sigma_y2", &meta_path)?,
        n_scaled,
        noise,
        interference_scale: meta_num(&meta, "interference_scale", &meta_path)?,
    };
    let model = MeasurementModel::new(PilotMatrix::new(pilot.clone(), taps)?, y, mixture.sigma_y2)?;
    let sparsity = h.iter().filter(|z| z.norm_sqr() > 0.0).count();
    Ok(Instance { h, pilot, mixture, model, sparsity })
}

fn fresh_instance(exp: &ExperimentConfig, snr_db: f64, sir_db: f64, seed: u64) -> Result<Instance> {
    let source = exp.scenario.source()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bench::generate_instance(&exp.scenario, &source, snr_db, sir_db, &mut rng)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_ctx(format!("creating {}", dir.display())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::Keys => {
            for (k, d) in KEYS {
                println!("{k:<32} {d}");
            }
        }
        Cmd::Generate { out, snr_db, sir_db, seed } => {
            let exp = cfg.experiment()?;
            let inst = fresh_instance(&exp, snr_db, sir_db, seed)?;
            create_dir(&out)?;
            write_cbin(out.join("pilot.cbin"), &inst.pilot)?;
            write_cbin(out.join("channel.cbin"), &inst.h)?;
            write_cbin(out.join("interference.cbin"), &inst.mixture.n_scaled)?;
            write_cbin(out.join("noise.cbin"), &inst.mixture.noise)?;
            write_cbin(out.join("y.cbin"), &inst.mixture.y)?;
            write_meta(&out.join("meta.txt"), &inst, snr_db, sir_db, seed)?;
            println!("wrote {} (M = {}, L = {})", out.display(), inst.model.measurements(), inst.model.taps());
        }
        Cmd::Estimate { input, method, snr_db, sir_db, seed, out } => {
            let exp = cfg.experiment()?;
            let inst = match &input {
                Some(dir) => load_instance(dir)?,
                None => fresh_instance(&exp, snr_db, sir_db, seed)?,
            };
            let mut exp = exp;
            exp.methods = vec![method];
            let source = exp.scenario.source()?;
            let learned = bench::load_learned_score(&exp)?;
            let h_hat = bench::estimate(method, &inst, &exp, &source, learned.as_deref(), exp.sampler.seed)?;
            if let Some(p) = out {
                write_cbin(p, &h_hat)?;
            }
            println!("{method} nmse_db = {:.4}", nmse_db(h_hat.as_slice(), inst.h.as_slice()));
        }
        Cmd::Bench { output } => {
            let mut exp = cfg.experiment()?;
            if output.is_some() {
                exp.output = output;
            }
            let dir = exp.output.clone().unwrap_or_else(|| PathBuf::from("bench-out"));
            let results = bench::run_experiment(&exp)?;
            let summary = bench::emit_reports(&dir, &results)?;
            println!("{:>8} {:>8} {:<12} {:>10} {:>10}", "snr_db", "sir_db", "method", "mean_db", "median_db");
            for r in &summary {
                println!(
                    "{:>8} {:>8} {:<12} {:>10.3} {:>10.3}",
                    r.snr_db,
                    r.sir_db,
                    r.method.to_string(),
                    r.mean_db,
                    r.median_db
                );
            }
            println!("reports in {}", dir.display());
        }
        Cmd::ExportInterferenceDataset { out, count, length, seed } => {
            let scenario = cfg.scenario()?;
            let source = scenario.source()?;
            let m = length.unwrap_or(scenario.measurements);
            if count == 0 || m == 0 {
                return Err(Error::Config("count and length must be positive".into()));
            }
            if length.is_some_and(|l| l != scenario.measurements) && source.prior.is_some() {
                return Err(Error::Config("Gaussian segments have length scenario.M; set that instead".into()));
            }
            create_dir(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..count {
                let seg: ComplexVector = generate_interference(&source.spec, m, &mut rng)?;
                write_cbin(out.join(format!("seg_{i:05}.cbin")), &seg)?;
            }
            println!("wrote {count} segments of length {m} to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
