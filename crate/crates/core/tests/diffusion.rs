use diffgnss_core::diffusion::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sched() -> DiffusionSchedule {
    DiffusionSchedule::from_config(&DiffusionConfig::default()).unwrap()
}

/// A denoiser that knows the injected noise inverts the forward process
/// exactly; deterministic DDIM keeps that noise, so the chain must land on
/// the clean sample.
#[test]
fn oracle_denoiser_round_trip() {
    let s = sched();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        let eps0: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let evaluations = rng.gen_range(1..=20);
        let ts = s.ddim_timesteps(evaluations).unwrap();
        let x: Vec<f64> = eps0.iter().zip(&z).map(|(&e, &zz)| forward_diffuse(e, zz, ts[0], &s).unwrap()).collect();
        let out = ddim_chain(x, &ts, &s, |t, x| {
            let ab = s.alpha_bar_at(t);
            Ok::<_, ()>(x.iter().zip(&z).map(|(&xt, &zz)| (xt - (1.0 - ab).sqrt() * zz) / ab.sqrt()).collect())
        })
        .unwrap();
        for (o, e) in out.iter().zip(&eps0) {
            assert!((o - e).abs() < 1e-5, "seed {seed}: {o} vs {e}");
        }
    }
}

#[test]
fn chain_with_exact_prediction_is_fixed_point() {
    let s = sched();
    let ts = s.ddim_timesteps(2).unwrap();
    assert_eq!(ts, vec![1000, 500]);
    let mut seen = Vec::new();
    let out = ddim_chain(vec![0.3, -1.2], &ts, &s, |t, _| {
        seen.push(t);
        Ok::<_, ()>(vec![0.5, 0.25])
    })
    .unwrap();
    assert_eq!(seen, vec![1000, 500]);
    assert_eq!(out, vec![0.5, 0.25]);
}

#[test]
fn forward_diffuse_variance_monte_carlo() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1, 10, 100, 500, 1000] {
        let draws = 100_000;
        let x0 = 0.7;
        let mean_shift = s.alpha_bar_at(t).sqrt() * x0;
        let var = (0..draws)
            .map(|_| {
                let v = forward_diffuse(x0, rng.sample(StandardNormal), t, &s).unwrap() - mean_shift;
                v * v
            })
            .sum::<f64>()
            / draws as f64;
        let expect = 1.0 - s.alpha_bar_at(t);
        assert!((var / expect - 1.0).abs() < 0.03, "t={t}: {var} vs {expect}");
    }
}

#[test]
fn timestep_range_is_checked() {
    let s = sched();
    assert!(forward_diffuse(1.0, 0.0, 0, &s).is_err());
    assert!(forward_diffuse(1.0, 0.0, 1001, &s).is_err());
    assert!(s.ddim_timesteps(0).is_err());
    assert!(s.ddim_timesteps(1001).is_err());
    assert!(DiffusionSchedule::linear(1000, 0.02, 1e-4).is_err());
    assert!(DiffusionSchedule::linear(10, 0.0, 0.5).is_err());
}

#[test]
fn uncertainty_label_examples() {
    assert_eq!(make_uncertainty_label(3.0, 3.0, 1.0, 0.1), 0.0);
    assert_eq!(make_uncertainty_label(19.5, 20.0, 1.0, 0.1), 0.0);
    assert_eq!(make_uncertainty_label(5.0, 50.0, 1.0, 0.1), 1.0);
    assert_eq!(make_uncertainty_label(0.5, 0.0, 1.0, 0.1), 0.0);
    assert_eq!(make_uncertainty_label(1.5, 0.0, 1.0, 0.1), 1.0);
    // absolute deviation under E1 but relative deviation too large
    assert_eq!(make_uncertainty_label(0.4, 0.2, 1.0, 0.1), 1.0);
}

proptest! {
    #[test]
    fn diffuse_limits(x0 in -50.0f64..50.0, z in -4.0f64..4.0, t in 1usize..=1000) {
        let s = sched();
        let ab = s.alpha_bar_at(t);
        prop_assert!((forward_diffuse(x0, 0.0, t, &s).unwrap() - ab.sqrt() * x0).abs() < 1e-12);
        prop_assert!((forward_diffuse(0.0, z, t, &s).unwrap() - (1.0 - ab).sqrt() * z).abs() < 1e-12);
    }

    #[test]
    fn timesteps_descend(k in 1usize..=1000) {
        let ts = sched().ddim_timesteps(k).unwrap();
        prop_assert_eq!(ts.len(), k);
        prop_assert_eq!(ts[0], 1000);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*ts.last().unwrap() >= 1);
    }

    #[test]
    fn alpha_bar_decreasing(t in 1usize..1000) {
        let s = sched();
        prop_assert!(s.alpha_bar_at(t + 1) < s.alpha_bar_at(t));
        prop_assert!(s.alpha_bar_at(t) > 0.0 && s.alpha_bar_at(t) < 1.0);
    }

    #[test]
    fn residual_refine_inverse(gt in -60.0f64..60.0, init in -60.0f64..60.0) {
        let s = 10.0;
        let e = make_gt_residual(gt, init, s);
        prop_assert!((refine(init, e, s) - gt).abs() < 1e-9);
        if init > gt {
            prop_assert!(e < 0.0);
        }
    }

    #[test]
    fn label_is_binary(init in -60.0f64..60.0, gt in -60.0f64..60.0) {
        let u = make_uncertainty_label(init, gt, 1.0, 0.1);
        prop_assert!(u == 0.0 || u == 1.0);
        if (init - gt).abs() >= 1.0 {
            prop_assert_eq!(u, 1.0);
        }
    }
}
