use diffgnss_core::gnss::geometry::{distance, ecef_to_enu, enu_to_ecef, geodetic_to_ecef, sub};
use diffgnss_core::gnss::*;
use diffgnss_core::synth::{generate_scene, SceneConfig};
use proptest::prelude::*;

fn noiseless(scene: SceneLabel, seed: u64) -> Sequence {
    let cfg = SceneConfig {
        los_sigma: 0.0,
        multipath_sigma: 0.0,
        nlos: None,
        dropout: 0.0,
        duration: 12.0,
        ..SceneConfig::preset(scene, "quiet", seed)
    };
    generate_scene(&cfg).unwrap()
}

#[test]
fn spp_recovers_noiseless_position_and_clock() {
    for seed in 0..8 {
        let cfg = SceneConfig {
            los_sigma: 0.0,
            multipath_sigma: 0.0,
            nlos: None,
            dropout: 0.0,
            duration: 5.0,
            clock_drift: 0.0,
            clock_bias: (37.5, 37.5),
            ..SceneConfig::preset(SceneLabel::HighRise, "q", seed)
        };
        for ep in generate_scene(&cfg).unwrap().epochs {
            let sol = solve_spp(&ep).unwrap();
            assert!(distance(&sol.position, &ep.gt_receiver_pos.unwrap()) < 1e-4);
            assert!((sol.clock_bias - 37.5).abs() < 1e-4, "clock {}", sol.clock_bias);
        }
    }
}

#[test]
fn common_mode_bias_goes_to_clock() {
    let seq = noiseless(SceneLabel::OpenSky, 5);
    for ep in &seq.epochs {
        let base = solve_spp(ep).unwrap();
        let mut shifted = ep.clone();
        shifted.sats.iter_mut().for_each(|s| s.pseudorange += 100.0);
        let moved = solve_spp(&shifted).unwrap();
        assert!(distance(&base.position, &moved.position) < 1e-3);
        assert!((moved.clock_bias - base.clock_bias - 100.0).abs() < 1e-3);
    }
}

#[test]
fn spp_failures() {
    let mut ep = noiseless(SceneLabel::OpenSky, 1).epochs.remove(0);
    ep.sats.truncate(3);
    assert!(matches!(solve_spp(&ep), Err(GnssError::InsufficientSatellites(3))));
    let mut ep = noiseless(SceneLabel::OpenSky, 1).epochs.remove(0);
    let first = ep.sats[0].sat_pos;
    ep.sats.iter_mut().for_each(|s| s.sat_pos = first);
    assert!(solve_spp(&ep).is_err());
}

#[test]
fn rss_examples() {
    assert_eq!(compute_rss(&[3.0, 4.0]), 5.0);
    assert_eq!(compute_rss(&[]), 0.0);
    assert_eq!(compute_rss(&[-2.0]), 2.0);
}

#[test]
fn ls_error_vanishes_without_noise() {
    for scene in SceneLabel::ALL {
        let seq = noiseless(scene, 2);
        for f in epoch_features(&seq).into_iter().flatten() {
            assert!(f.ls_errors.iter().all(|e| e.abs() < 1e-4), "{:?}", f.ls_errors);
            assert!(f.rss < 1e-4);
        }
    }
}

#[test]
fn ls_error_sums_against_geometry() {
    // residuals are orthogonal to the clock column: they sum to ~0
    let cfg = SceneConfig { duration: 10.0, ..SceneConfig::preset(SceneLabel::Wooded, "w", 4) };
    let seq = generate_scene(&cfg).unwrap();
    for f in epoch_features(&seq).into_iter().flatten() {
        assert!(f.ls_errors.iter().sum::<f64>().abs() < 1e-6);
    }
}

#[test]
fn zscored_train_channels() {
    let cfg = WindowConfig::default();
    let mut windows = Vec::new();
    for (i, scene) in SceneLabel::ALL.into_iter().enumerate() {
        let seq = generate_scene(&SceneConfig { duration: 20.0, ..SceneConfig::preset(scene, &format!("s{i}"), i as u64) })
            .unwrap();
        windows.extend(augment(&seq, &cfg).unwrap());
    }
    let stats = NormStats::compute(&windows);
    stats.normalize(&mut windows);
    for c in 0..NUM_FEATURES {
        let vals: Vec<f64> = windows
            .iter()
            .flat_map(|w| {
                (0..w.len()).flat_map(move |t| (0..w.n_max()).filter(move |&s| w.is_valid(s, t)).map(move |s| w.feature(s, t)[c]))
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3 || var < 1e-12, "channel {c} var {var}");
    }
    for w in &windows {
        for t in 0..w.len() {
            for s in 0..w.n_max() {
                if !w.is_valid(s, t) {
                    assert_eq!(w.feature(s, t), &[0.0; NUM_FEATURES]);
                }
            }
        }
    }
}

#[test]
fn windows_are_time_ordered_and_split_disjoint() {
    let seq = generate_scene(&SceneConfig { duration: 40.0, ..SceneConfig::preset(SceneLabel::Bridge, "b", 8) }).unwrap();
    let windows = build_windows(&seq, &WindowConfig::default()).unwrap();
    for w in &windows {
        assert!(w.epoch_times.windows(2).all(|p| p[0] < p[1]));
    }
    let sets = split_dataset(windows.clone()).unwrap();
    let (a, b, c) = (sets.train.len(), sets.valid.len(), sets.test.len());
    assert_eq!(a + b + c, windows.len());
    let last = |v: &[FeatureWindow]| v.iter().map(|w| w.last_time()).fold(f64::MIN, f64::max);
    let first = |v: &[FeatureWindow]| v.iter().map(|w| w.last_time()).fold(f64::MAX, f64::min);
    assert!(last(&sets.train) < first(&sets.valid));
    assert!(last(&sets.valid) < first(&sets.test));
}

#[test]
fn too_short_sequence_is_rejected() {
    let mut seq = noiseless(SceneLabel::OpenSky, 3);
    seq.epochs.truncate(2);
    assert!(matches!(build_windows(&seq, &WindowConfig::default()), Err(GnssError::WindowTooShort { .. })));
}

#[test]
fn observation_csv_round_trip_is_bit_exact() {
    let seq = generate_scene(&SceneConfig { duration: 6.0, ..SceneConfig::preset(SceneLabel::HighRise, "rt", 1) }).unwrap();
    let mut buf = Vec::new();
    write_observations(std::slice::from_ref(&seq), &mut buf).unwrap();
    let back = read_observations(buf.as_slice()).unwrap();
    assert_eq!(back, vec![seq]);
    let mut again = Vec::new();
    write_observations(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

proptest! {
    #[test]
    fn enu_round_trip(lat in -80.0f64..80.0, lon in -179.0f64..179.0, e in -500.0f64..500.0, n in -500.0f64..500.0, u in -50.0f64..50.0) {
        let o = geodetic_to_ecef(lat, lon, 10.0);
        let d = enu_to_ecef(&[e, n, u], &o);
        let back = ecef_to_enu(&d, &o);
        prop_assert!((back[0] - e).abs() < 1e-6 && (back[1] - n).abs() < 1e-6 && (back[2] - u).abs() < 1e-6);
        let p = [o[0] + d[0], o[1] + d[1], o[2] + d[2]];
        prop_assert!((distance(&p, &o) - (e * e + n * n + u * u).sqrt()).abs() < 1e-6);
        prop_assert!((ecef_to_enu(&sub(&p, &o), &o)[0] - e).abs() < 1e-6);
    }

    #[test]
    fn rss_is_euclidean_norm(v in proptest::collection::vec(-100.0f64..100.0, 0..32)) {
        let r = compute_rss(&v);
        prop_assert!(r >= 0.0);
        prop_assert!((r * r - v.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-6 * (1.0 + r * r));
    }
}
