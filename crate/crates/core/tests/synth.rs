use diffgnss_core::gnss::{build_windows, write_observations, SceneLabel, WindowConfig};
use diffgnss_core::synth::{generate_scene, make_benchmark_suite, nlos_epoch_fraction, SceneConfig, SuiteConfig};
use proptest::prelude::*;

#[test]
fn default_suite_shape() {
    let suite = make_benchmark_suite(7, &SuiteConfig::default()).unwrap();
    let wc = WindowConfig::default();
    let count = |seqs: &[diffgnss_core::gnss::Sequence]| -> usize {
        seqs.iter().map(|s| build_windows(s, &wc).unwrap().len()).sum()
    };
    let n = count(&suite.train);
    assert!((1900..=2100).contains(&n), "train windows {n}");
    for split in [&suite.train, &suite.valid, &suite.test] {
        for scene in SceneLabel::ALL {
            assert!(split.iter().any(|s| s.epochs[0].scene == scene), "{scene} missing");
        }
    }
    let frac = nlos_epoch_fraction(&suite.test, SceneLabel::HighRise, 8.0);
    assert!((0.2..=0.4).contains(&frac), "high_rise NLOS fraction {frac}");
    let max_err = suite.train.iter().flat_map(|s| &s.epochs).flat_map(|e| &e.sats).filter_map(|s| s.gt_error).fold(0.0, f64::max);
    assert!(max_err > 30.0 && max_err < 60.0, "{max_err}");
}

#[test]
fn open_sky_noise_stays_in_three_sigma() {
    let cfg = SceneConfig { multipath_sigma: 0.0, los_sigma: 0.5, duration: 60.0, ..SceneConfig::preset(SceneLabel::OpenSky, "o", 3) };
    let errs: Vec<f64> = generate_scene(&cfg).unwrap().epochs.iter().flat_map(|e| e.sats.iter().map(|s| s.gt_error.unwrap())).collect();
    let outside = errs.iter().filter(|e| e.abs() >= 1.5).count() as f64 / errs.len() as f64;
    assert!(outside < 0.01, "{outside}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn same_seed_same_bytes(seed in any::<u64>()) {
        let cfg = SuiteConfig { segments_per_scene: 1, epochs: 20, ..SuiteConfig::default() };
        let bytes = |s: u64| {
            let suite = make_benchmark_suite(s, &cfg).unwrap();
            let mut buf = Vec::new();
            write_observations(&suite.test, &mut buf).unwrap();
            buf
        };
        prop_assert_eq!(bytes(seed), bytes(seed));
        prop_assert_ne!(bytes(seed), bytes(seed ^ 1));
    }
}
