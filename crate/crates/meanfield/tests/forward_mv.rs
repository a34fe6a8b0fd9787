use meanfield::core::*;
use meanfield::forward_mv::*;
use meanfield::Error;
use proptest::prelude::*;

fn rk4(rate: f64, x0: f64, t: f64, sub: usize) -> f64 {
    let f = |x: f64| rate * x;
    let h = t / sub as f64;
    let mut x = x0;
    for _ in 0..sub {
        let k1 = f(x);
        let k2 = f(x + 0.5 * h * k1);
        let k3 = f(x + 0.5 * h * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

fn run(model: &LinearMv, t: f64, m: usize, n: usize, seed: u64) -> PathProcess {
    let grid = TimeGrid::new(t, m).unwrap();
    let noise = sample_brownian(&grid, &EnsembleConfig::new(n, 1, seed).unwrap());
    simulate_forward(model, &grid, &noise).unwrap()
}

#[test]
fn zero_model_is_constant() {
    let model = LinearMv { a: 0.0, c: 0.0, r: 0.0, s: 0.0, s_x: 0.0, x0: 2.5 };
    let x = run(&model, 1.0, 16, 64, 1);
    assert!(x.data().iter().all(|v| *v == 2.5));
}

#[test]
fn linear_in_law_mean() {
    let model = LinearMv { a: 0.5, c: 0.0, r: 0.0, s: 0.2, s_x: 0.0, x0: 1.0 };
    let n = 8192;
    let x = run(&model, 1.0, 64, n, 7);
    let last = x.row(64);
    let m = last.iter().sum::<f64>() / n as f64;
    let sd = (last.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
    let err = (m - 0.5f64.exp()).abs();
    assert!(err <= 3.0 * sd / (n as f64).sqrt(), "mean {m}, err {err}, se {}", sd / (n as f64).sqrt());
}

#[test]
fn mean_follows_moment_ode_and_refines() {
    let model = LinearMv { a: 0.5, c: 0.3, r: 0.0, s: 0.1, s_x: 0.0, x0: 1.0 };
    let err = |m: usize, n: usize| {
        let x = run(&model, 1.0, m, n, 3);
        let grid = TimeGrid::new(1.0, m).unwrap();
        (0..=m)
            .map(|k| (x.mean(k)[0] - rk4(0.8, 1.0, grid.t(k), 1000)).abs())
            .fold(0.0, f64::max)
    };
    let coarse = err(8, 2048);
    let fine = err(64, 32768);
    assert!(fine < coarse, "fine {fine}, coarse {coarse}");
    // Euler bias at dt = 1/64 is about 0.011 at T; noise is a few thousandths.
    assert!(fine < 0.02, "fine {fine}");
}

#[test]
fn rk4_oracle_matches_exponential() {
    assert!((rk4(0.8, 1.0, 1.0, 1000) - 0.8f64.exp()).abs() < 1e-12);
}

#[test]
fn scaling_brownian_p2() {
    let model = LinearMv { a: 0.0, c: 0.0, r: 0.0, s: 1.0, s_x: 0.0, x0: 0.0 };
    let cfg = EnsembleConfig::new(8192, 1, 5).unwrap();
    let rep = moment_scaling_check(&model, 2.0, &[0.01, 0.02, 0.05, 0.1], &cfg, 32).unwrap();
    let slope = rep.slope.unwrap();
    assert!((slope - 1.0).abs() <= 0.15, "slope {slope}");
    assert!(!rep.degenerate);

    // Larger-ensemble oracle: the moment at one horizon is consistent with 10x N.
    let big = moment_scaling_check(&model, 2.0, &[0.01, 0.02, 0.05, 0.1], &EnsembleConfig::new(81920, 1, 6).unwrap(), 32)
        .unwrap();
    for (a, b) in rep.moments.iter().zip(&big.moments) {
        assert!((a / b - 1.0).abs() < 0.05, "{a} vs {b}");
    }
}

#[test]
fn scaling_degenerate() {
    let model = LinearMv { a: 0.0, c: 0.0, r: 0.0, s: 0.0, s_x: 0.0, x0: 1.0 };
    let cfg = EnsembleConfig::new(16, 1, 0).unwrap();
    let rep = moment_scaling_check(&model, 2.0, &[0.01, 0.1, 1.0], &cfg, 8).unwrap();
    assert!(rep.degenerate);
    assert!(rep.slope.is_none());
}

#[test]
fn scaling_drift_p4() {
    let model = LinearMv { a: 0.0, c: 0.0, r: 1.0, s: 1.0, s_x: 0.0, x0: 0.0 };
    let cfg = EnsembleConfig::new(8192, 1, 9).unwrap();
    let rep = moment_scaling_check(&model, 4.0, &[1e-3, 3e-3, 1e-2, 3e-2, 1e-1], &cfg, 32).unwrap();
    let slope = rep.slope.unwrap();
    assert!((slope - 2.0).abs() <= 0.4, "slope {slope}");
}

#[test]
fn scaling_rejects_bad_input() {
    let model = LinearMv { a: 0.0, c: 0.0, r: 0.0, s: 1.0, s_x: 0.0, x0: 0.0 };
    let cfg = EnsembleConfig::new(16, 1, 0).unwrap();
    assert!(moment_scaling_check(&model, 1.0, &[0.1, 0.2, 0.3], &cfg, 4).is_err());
    assert!(moment_scaling_check(&model, 2.0, &[0.1, 0.2], &cfg, 4).is_err());
}

#[test]
fn initial_condition_linearity() {
    let base = LinearMv { a: 0.5, c: -0.2, r: 0.0, s: 0.2, s_x: 0.0, x0: 1.0 };
    let m = |x0: f64| {
        let x = run(&LinearMv { x0, ..base }, 1.0, 32, 4096, 13);
        x.mean_path().into_iter().map(|v| v[0]).collect::<Vec<f64>>()
    };
    let (m1, m2, m0) = (m(1.0), m(2.0), m(0.0));
    for k in 0..=32 {
        // The affine map x0 -> X is exact on common noise.
        assert!((m2[k] - 2.0 * m1[k] + m0[k]).abs() < 1e-12);
        assert!(m0[k].abs() < 4.0 * 0.2 / (4096f64).sqrt() * 1.5);
    }
}

#[test]
fn classical_reduction_matches_plain_euler() {
    let drift = |_t: f64, _law: &EnsembleSnapshot, own: &State| -own.x + 0.3;
    let diffusion = |_t: f64, _law: &EnsembleSnapshot, own: &State| 0.3 + 0.1 * own.x.sin();
    let model = FnForward { x0: 0.5, drift, diffusion };
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let noise = sample_brownian(&grid, &EnsembleConfig::new(50, 1, 4).unwrap());
    let x = simulate_forward(&model, &grid, &noise).unwrap();
    for i in 0..50 {
        let mut v = 0.5f64;
        for k in 0..20 {
            v = v + (-v + 0.3) * grid.dt + (0.3 + 0.1 * v.sin()) * noise.dw(k, i)[0];
            assert_eq!(x.get(k + 1, i), v);
        }
    }
}

#[test]
fn divergence_is_reported() {
    let model = LinearMv { a: 0.0, c: 2000.0, r: 0.0, s: 0.0, s_x: 0.0, x0: 1.0 };
    match simulate_forward(&model, &TimeGrid::new(1.0, 10).unwrap(), &sample_brownian(
        &TimeGrid::new(1.0, 10).unwrap(),
        &EnsembleConfig::new(4, 1, 0).unwrap(),
    )) {
        Err(Error::Divergence { step, .. }) => assert!(step <= 10),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn noise_shape_mismatch() {
    let model = LinearMv { a: 0.0, c: 0.0, r: 0.0, s: 1.0, s_x: 0.0, x0: 0.0 };
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let noise = sample_brownian(&TimeGrid::new(1.0, 5).unwrap(), &EnsembleConfig::new(4, 1, 0).unwrap());
    assert!(matches!(simulate_forward(&model, &grid, &noise), Err(Error::InvalidConfig(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn deterministic_and_parallel_invariant(seed in any::<u64>(), a in -1.0f64..1.0, s in 0.0f64..1.0) {
        let model = LinearMv { a, c: 0.1, r: 0.0, s, s_x: 0.0, x0: 1.0 };
        let x1 = run(&model, 1.0, 8, 64, seed);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let x2 = pool.install(|| run(&model, 1.0, 8, 64, seed));
        prop_assert_eq!(x1, x2);
    }

    #[test]
    fn forward_paths_are_adapted(seed in any::<u64>(), k in 1usize..8) {
        // Changing increments at steps >= k leaves nodes <= k untouched.
        let model = LinearMv { a: 0.4, c: -0.3, r: 0.1, s: 0.5, s_x: 0.1, x0: 1.0 };
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let noise = sample_brownian(&grid, &EnsembleConfig::new(16, 1, seed).unwrap());
        let mut other = noise.clone();
        for j in k..8 {
            for i in 0..16 {
                other.increments.set(j, i, 1.0);
            }
        }
        let x1 = simulate_forward(&model, &grid, &noise).unwrap();
        let x2 = simulate_forward(&model, &grid, &other).unwrap();
        for j in 0..=k {
            prop_assert_eq!(x1.row(j), x2.row(j));
        }
    }
}
