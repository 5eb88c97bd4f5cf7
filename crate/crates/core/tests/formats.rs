use dmsbl::score::{LearnedScore, ScoreNetwork, ScoreProvider, UnetConfig, VjpMode};
use dmsbl::sde::VpSchedule;
use dmsbl::signal::{decode_cbin, encode_cbin, read_cbin, write_cbin};
use dmsbl::{Complex64, ComplexVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn cbin_round_trip_is_f32_exact(vals in proptest::collection::vec((-1e6f32..1e6, -1e6f32..1e6), 1..64)) {
        let v = ComplexVector::new(vals.iter().map(|&(r, i)| Complex64::new(r as f64, i as f64)).collect()).unwrap();
        let bytes = encode_cbin(&v);
        prop_assert_eq!(bytes.len(), 16 + 8 * v.len());
        prop_assert_eq!(decode_cbin(&bytes).unwrap(), v);
    }
}

#[test]
fn cbin_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.cbin");
    let v = ComplexVector::new(vec![Complex64::new(1.5, -2.0), Complex64::new(0.0, 0.25)]).unwrap();
    write_cbin(&p, &v).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"CSIG");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.5);
    assert_eq!(read_cbin(&p).unwrap(), v);

    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 1);
    assert_eq!(decode_cbin(&bad).unwrap_err().exit_code(), 3);
}

#[test]
fn dmsc_save_load_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("net.dmsc");
    let cfg = UnetConfig { channels: 6, blocks: 2, kernel: 3, embed_dim: 16 };
    let net = ScoreNetwork::unet(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    net.save(&p).unwrap();
    assert_eq!(&std::fs::read(&p).unwrap()[..4], b"DMSC");
    let back = ScoreNetwork::load(&p).unwrap();
    // weights are stored as f32: a second round trip is exact
    let p2 = dir.path().join("again.dmsc");
    back.save(&p2).unwrap();
    assert_eq!(ScoreNetwork::load(&p2).unwrap(), back);

    let x: Vec<Complex64> = (0..20).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
    for t in [0.1, 0.5, 0.9] {
        let (a, b) = (net.forward(&x, t).unwrap(), back.forward(&x, t).unwrap());
        let num: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).norm_sqr()).sum();
        let den: f64 = a.iter().map(|u| u.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-5, "t = {t}");
    }
    let learned = LearnedScore::load(&p, VjpMode::Identity).unwrap();
    let tm = VpSchedule::default().at(0.4).unwrap();
    let xm = dmsbl::linalg::from_column(&x);
    let s = learned.score_batch(xm.as_ref(), tm).unwrap();
    assert!(dmsbl::linalg::all_finite(s.as_ref()));
}

#[test]
fn vjp_mode_names() {
    assert_eq!("fd".parse::<VjpMode>().unwrap(), VjpMode::FiniteDifference);
    assert_eq!("identity".parse::<VjpMode>().unwrap(), VjpMode::Identity);
    assert!("autodiff".parse::<VjpMode>().is_err());
    assert_eq!(VjpMode::FiniteDifference.to_string(), "fd");
}
