use meanfield::core::*;
use meanfield::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn grid_nodes() {
    let g = TimeGrid::new(1.0, 4).unwrap();
    assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let g = TimeGrid::new(2.0, 1).unwrap();
    assert_eq!(g.nodes(), vec![0.0, 2.0]);
    let g = make_time_grid(1.0, 64).unwrap();
    assert_eq!(g.dt, 0.015625);
}

#[test]
fn grid_rejects_bad_input() {
    assert!(matches!(TimeGrid::new(0.0, 4), Err(Error::InvalidConfig(_))));
    assert!(matches!(TimeGrid::new(-1.0, 4), Err(Error::InvalidConfig(_))));
    assert!(matches!(TimeGrid::new(1.0, 0), Err(Error::InvalidConfig(_))));
    assert!(TimeGrid::new(f64::NAN, 4).is_err());
}

#[test]
fn ensemble_config_bounds() {
    assert!(EnsembleConfig::new(1, 1, 0).is_err());
    assert!(EnsembleConfig::new(2, 0, 0).is_err());
    assert!(EnsembleConfig::new(2, 1, 0).is_ok());
}

#[test]
fn brownian_is_deterministic() {
    let g = TimeGrid::new(1.0, 16).unwrap();
    let cfg = EnsembleConfig::new(500, 2, 42).unwrap();
    let a = sample_brownian(&g, &cfg);
    let b = sample_brownian(&g, &cfg);
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let c = pool.install(|| sample_brownian(&g, &cfg));
    assert_eq!(a, c);
}

#[test]
fn brownian_seeds_differ() {
    let g = TimeGrid::new(1.0, 8).unwrap();
    let a = sample_brownian(&g, &EnsembleConfig::new(64, 1, 1).unwrap());
    let b = sample_brownian(&g, &EnsembleConfig::new(64, 1, 2).unwrap());
    assert_ne!(a.increments.data(), b.increments.data());
}

#[test]
fn brownian_step_variance() {
    let g = TimeGrid::new(1.0, 64).unwrap();
    let n = 8192;
    let w = sample_brownian(&g, &EnsembleConfig::new(n, 1, 2024).unwrap());
    for k in 0..g.steps {
        let row = w.increments.row(k);
        let m = row.iter().sum::<f64>() / n as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        assert!((v / g.dt - 1.0).abs() < 0.05, "step {k}: variance {v} vs dt {}", g.dt);
    }
}

#[test]
fn brownian_path_accumulates() {
    let g = TimeGrid::new(1.0, 5).unwrap();
    let w = sample_brownian(&g, &EnsembleConfig::new(3, 1, 9).unwrap());
    let p = w.path();
    assert_eq!(p.get(0, 1), 0.0);
    let s: f64 = (0..5).map(|k| w.dw(k, 1)[0]).sum();
    assert!((p.get(5, 1) - s).abs() < 1e-15);
}

fn mean_kernel(_t: f64, xp: &State, _x: &State, out: &mut [f64]) {
    out[0] = xp.x;
}

#[test]
fn mean_field_examples() {
    let snap_x = [1.0, 2.0, 3.0];
    let snap = EnsembleSnapshot::forward(&snap_x);
    let own = State { i: 0, x: 7.0, y: 0.0, z: &[] };
    assert_eq!(empirical_mean_field(&snap, &own, 0.0, 1, mean_kernel).unwrap(), vec![2.0]);
    let classical = |_t: f64, _xp: &State, x: &State, out: &mut [f64]| out[0] = x.x;
    assert_eq!(empirical_mean_field(&snap, &own, 0.0, 1, classical).unwrap(), vec![7.0]);
    let own2 = State { i: 0, x: 2.0, y: 0.0, z: &[] };
    let prod = |_t: f64, xp: &State, x: &State, out: &mut [f64]| out[0] = xp.x * x.x;
    assert_eq!(empirical_mean_field(&snap, &own2, 0.0, 1, prod).unwrap(), vec![4.0]);
}

#[test]
fn mean_field_non_finite_names_particle() {
    let snap_x = [1.0, 0.0, 3.0];
    let snap = EnsembleSnapshot::forward(&snap_x);
    let own = State { i: 0, x: 1.0, y: 0.0, z: &[] };
    let recip = |_t: f64, xp: &State, _x: &State, out: &mut [f64]| out[0] = 1.0 / xp.x;
    match empirical_mean_field(&snap, &own, 0.0, 1, recip) {
        Err(Error::NumericalDomain { particle, .. }) => assert_eq!(particle, 1),
        other => panic!("expected numerical-domain error, got {other:?}"),
    }
}

#[test]
fn mean_field_law_of_large_numbers() {
    let n = 4096;
    let mut within = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let snap = EnsembleSnapshot::forward(&xs);
        let own = State { i: 0, x: 0.0, y: 0.0, z: &[] };
        let m = empirical_mean_field(&snap, &own, 0.0, 1, mean_kernel).unwrap()[0];
        if m.abs() <= 4.0 / (n as f64).sqrt() {
            within += 1;
        }
    }
    assert!(within >= 99, "{within} of 100 seeds within 4/sqrt(N)");
}

#[test]
fn snapshot_means() {
    let x = [1.0, 3.0];
    let y = [2.0, 4.0];
    let z = [1.0, 10.0, 3.0, 20.0];
    let s = EnsembleSnapshot::new(&x, &y, &z, 2);
    assert_eq!(s.mean_x, 2.0);
    assert_eq!(s.mean_y, 3.0);
    assert_eq!(s.mean_z, vec![2.0, 15.0]);
    assert_eq!(s.state(1).z, &[3.0, 20.0]);
}

proptest! {
    #[test]
    fn grid_invariants(t in 1e-3f64..100.0, m in 1usize..500) {
        let g = TimeGrid::new(t, m).unwrap();
        let nodes = g.nodes();
        prop_assert_eq!(nodes.len(), m + 1);
        prop_assert_eq!(nodes[0], 0.0);
        prop_assert_eq!(nodes[m], t);
        prop_assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        prop_assert!((g.dt * m as f64 - t).abs() <= t * f64::EPSILON);
    }

    #[test]
    fn classical_kernel_is_exact(xs in prop::collection::vec(-1e3f64..1e3, 2..50), own in -1e3f64..1e3) {
        let snap = EnsembleSnapshot::forward(&xs);
        let st = State { i: 0, x: own, y: 0.0, z: &[] };
        let v = empirical_mean_field(&snap, &st, 0.3, 1, |_t: f64, _xp: &State, x: &State, out: &mut [f64]| {
            out[0] = x.x.sin()
        }).unwrap();
        prop_assert_eq!(v[0], own.sin());
    }

    #[test]
    fn brownian_depends_only_on_indices(seed in any::<u64>(), n in 2usize..20, extra in 1usize..10) {
        // Particle i's stream is the same whatever the ensemble size.
        let g = TimeGrid::new(1.0, 4).unwrap();
        let a = sample_brownian(&g, &EnsembleConfig::new(n, 1, seed).unwrap());
        let b = sample_brownian(&g, &EnsembleConfig::new(n + extra, 1, seed).unwrap());
        for k in 0..4 {
            for i in 0..n {
                prop_assert_eq!(a.dw(k, i), b.dw(k, i));
            }
        }
    }
}
