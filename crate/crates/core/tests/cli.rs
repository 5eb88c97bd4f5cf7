use std::path::Path;
use std::process::{Command, Output};

use dmsbl::score::{ScoreNetwork, UnetConfig};
use dmsbl::signal::{read_cbin, CBIN_MAGIC};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: &[&str] = &[
    "--set", "scenario.M=24",
    "--set", "scenario.L=12",
    "--set", "scenario.p0=3",
    "--set", "sampler.K=4",
    "--set", "sde.steps=12",
];

fn dmsbl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmsbl")).args(args).output().expect("spawn dmsbl")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    // config options must precede the subcommand
    let mut v = SMALL.to_vec();
    v.extend_from_slice(args);
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn nmse_from(o: &Output) -> f64 {
    stdout(o).trim().rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn generate_then_estimate_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst");
    let out = dmsbl(&with_small(&["generate", "--out", inst.to_str().unwrap(), "--seed", "4", "--sir-db", "-5"]));
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["pilot.cbin", "channel.cbin", "interference.cbin", "noise.cbin", "y.cbin", "meta.txt"] {
        assert!(inst.join(f).exists(), "{f}");
    }
    assert_eq!(read_cbin(inst.join("pilot.cbin")).unwrap().len(), 24 + 12 - 1);
    assert_eq!(read_cbin(inst.join("y.cbin")).unwrap().len(), 24);

    // y.cbin is the sum of its parts
    let y = read_cbin(inst.join("y.cbin")).unwrap();
    let n = read_cbin(inst.join("interference.cbin")).unwrap();
    let e = read_cbin(inst.join("noise.cbin")).unwrap();
    let h = read_cbin(inst.join("channel.cbin")).unwrap();
    let a = dmsbl::signal::PilotMatrix::new(read_cbin(inst.join("pilot.cbin")).unwrap(), 12).unwrap();
    let ah = a.apply(&h).unwrap();
    for i in 0..24 {
        assert!((y[i] - ah[i] - n[i] - e[i]).norm() < 1e-5, "samples are stored as f32");
    }

    let est = dir.path().join("h_hat.cbin");
    for method in ["mmse", "omp", "sbl", "dmsbl-dmps", "dmsbl-pgdm"] {
        let mut args =
            vec!["--set", "scenario.interference=gaussian", "estimate", "--input", inst.to_str().unwrap(), "--method", method];
        args.extend_from_slice(&["--out", est.to_str().unwrap()]);
        let out = dmsbl(&with_small(&args));
        assert!(out.status.success(), "{method}: {}", stderr(&out));
        assert!(stdout(&out).starts_with(method));
        assert!(nmse_from(&out).is_finite());
        assert_eq!(read_cbin(&est).unwrap().len(), 12);
    }
}

#[test]
fn estimate_is_reproducible() {
    let args = with_small(&["--set", "scenario.interference=gaussian", "estimate", "--method", "dmsbl-pgdm", "--seed", "3"]);
    let a = dmsbl(&args);
    let b = dmsbl(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn config_errors_exit_with_1() {
    let out = dmsbl(&["--set", "sampler.nuu=1", "keys"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sampler.nuu"));

    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "bench.trials = 0\n").unwrap();
    let out = dmsbl(&["--config", conf.to_str().unwrap(), "bench"]);
    assert_eq!(out.status.code(), Some(1));

    let out = dmsbl(&["estimate", "--method", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn io_errors_exit_with_3() {
    let out = dmsbl(&["--config", "/nonexistent/run.conf", "keys"]);
    assert_eq!(out.status.code(), Some(3));

    let out = dmsbl(&with_small(&["--set", "score.weights=/nonexistent/lfm.dmsc", "estimate", "--method", "dmsbl-dmps"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/nonexistent/lfm.dmsc"), "{}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    let out = dmsbl(&with_small(&["estimate", "--input", dir.path().to_str().unwrap(), "--method", "omp"]));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn learned_score_drives_lfm_estimation() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("tiny.dmsc");
    let cfg = UnetConfig { channels: 4, blocks: 1, kernel: 3, embed_dim: 8 };
    ScoreNetwork::unet(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().save(&weights).unwrap();
    let w = format!("score.weights={}", weights.display());
    for vjp in ["fd", "identity"] {
        let v = format!("score.vjp={vjp}");
        let out = dmsbl(&with_small(&["--set", &w, "--set", &v, "estimate", "--method", "dmsbl-pgdm"]));
        assert!(out.status.success(), "{vjp}: {}", stderr(&out));
        assert!(nmse_from(&out).is_finite());
    }
}

fn bench_run(dir: &Path, conf: &Path) -> String {
    let out = dmsbl(&["--config", conf.to_str().unwrap(), "bench", "--output", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    std::fs::read_to_string(dir.join("results.csv")).unwrap()
}

#[test]
fn bench_writes_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        "# tiny sweep\nscenario.interference = gaussian\nscenario.M = 20\nscenario.L = 10\nscenario.p0 = 2\n\
         scenario.snr_db = 10, 20\nscenario.sir_db = 0, 5\nsde.steps = 10\nguidance.K = 4\nbench.trials = 2\nbench.seed = 8\n",
    )
    .unwrap();
    let a = bench_run(&dir.path().join("a"), &conf);
    let b = bench_run(&dir.path().join("b"), &conf);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1 + 2 * 2 * 2 * 5);
    let plots = dir.path().join("a").join("plotdata");
    let names: Vec<String> = std::fs::read_dir(&plots).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
    let p = std::fs::read_to_string(plots.join("nmse_vs_snr_sir_5.csv")).unwrap();
    assert_eq!(p.lines().next().unwrap(), "snr_db,dmsbl-dmps,dmsbl-pgdm,mmse,omp,sbl");
    assert_eq!(p.lines().count(), 3);
    let rows = dmsbl::bench::load_results(&dir.path().join("a").join("results.csv")).unwrap();
    let summary = dmsbl::bench::summarize(&rows);
    let csv = std::fs::read_to_string(dir.path().join("a").join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + summary.len());
}

#[test]
fn export_writes_decodable_segments() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("segs");
    let out = dmsbl(&["export-interference-dataset", "--out", out_dir.to_str().unwrap(), "--count", "3", "--length", "64"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for i in 0..3 {
        let p = out_dir.join(format!("seg_{i:05}.cbin"));
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], CBIN_MAGIC);
        let seg = read_cbin(&p).unwrap();
        assert_eq!(seg.len(), 64);
        // LFM segments are unit modulus
        assert!(seg.iter().all(|z| (z.norm() - 1.0).abs() < 1e-6));
    }
    assert!(!out_dir.join("seg_00003.cbin").exists());

    // same seed, same bytes
    let again = dir.path().join("again");
    let out = dmsbl(&["export-interference-dataset", "--out", again.to_str().unwrap(), "--count", "3", "--length", "64"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(out_dir.join("seg_00002.cbin")).unwrap(), std::fs::read(again.join("seg_00002.cbin")).unwrap());

    let gp = dir.path().join("gp");
    let out = dmsbl(&[
        "--set", "scenario.interference=gaussian", "--set", "scenario.M=32",
        "export-interference-dataset", "--out", gp.to_str().unwrap(), "--count", "2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read_cbin(gp.join("seg_00001.cbin")).unwrap().len(), 32);
}

#[test]
fn keys_lists_every_config_key() {
    let out = dmsbl(&["keys"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for (k, _) in dmsbl::config::KEYS {
        assert!(text.contains(k), "{k}");
    }
}

#[test]
fn options_after_the_subcommand_are_rejected() {
    let out = dmsbl(&["keys", "--set", "sampler.nu=0.2"]);
    assert_eq!(out.status.code(), Some(1));
}
