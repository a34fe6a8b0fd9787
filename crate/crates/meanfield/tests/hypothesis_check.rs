use meanfield::core::*;
use meanfield::fbsde_solver::*;
use meanfield::hypothesis_check::*;
use meanfield::lq_examples::{lq1_model, Lq1Params};
use meanfield::smp_control::{hamiltonian, Point};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn row(mx: f64, my: f64, mz: f64, x: f64, y: f64, z: f64, c: f64) -> AffineRow {
    AffineRow { mx, my, mz: vec![mz], x, y, z: vec![z], c }
}

fn model(f: AffineRow, b: AffineRow, s: AffineRow, phi: f64) -> AffineCoupled {
    AffineCoupled { d: 1, b, sigma: vec![s], f, phi_slope: phi, phi_const: 0.0, x0: 0.0 }
}

fn sampler(n: usize) -> Sampler {
    Sampler::with_samples(n)
}

/// `F(Theta) = A Theta` for `Theta = (x', y', z', x, y, z)` with Dirac laws.
fn coefficient_matrix(m: &AffineCoupled) -> DMatrix<f64> {
    let r = |a: &AffineRow| [a.mx, a.my, a.mz[0], a.x, a.y, a.z[0]];
    let neg_f: Vec<f64> = r(&m.f).iter().map(|v| -v).collect();
    let mut data = neg_f;
    data.extend(r(&m.b));
    data.extend(r(&m.sigma[0]));
    DMatrix::from_row_slice(3, 6, &data)
}

/// Re-evaluates a monotonicity witness: returns `<F(u1) - F(u2), u1 - u2> / E|u1 - u2|^2`.
fn reevaluate(m: &AffineCoupled, w: &Witness) -> f64 {
    match w {
        Witness::Coefficients { at, first, second, .. } => {
            let split = |rows: &Vec<Vec<f64>>| {
                let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
                let y: Vec<f64> = rows.iter().map(|r| r[1]).collect();
                let z: Vec<f64> = rows.iter().map(|r| r[2]).collect();
                (x, y, z)
            };
            let (x1, y1, z1) = split(first);
            let (x2, y2, z2) = split(second);
            let l1 = EnsembleSnapshot::new(&x1, &y1, &z1, 1);
            let l2 = EnsembleSnapshot::new(&x2, &y2, &z2, 1);
            let (mut pair, mut norm) = (0.0, 0.0);
            for j in 0..x1.len() {
                let (s1, s2) = (l1.state(j), l2.state(j));
                let (mut a, mut b) = ([0.0], [0.0]);
                m.sigma(*at, &l1, &s1, &mut a);
                m.sigma(*at, &l2, &s2, &mut b);
                let df = [-(m.f(*at, &l1, &s1) - m.f(*at, &l2, &s2)), m.b(*at, &l1, &s1) - m.b(*at, &l2, &s2), a[0] - b[0]];
                let du = [x1[j] - x2[j], y1[j] - y2[j], z1[j] - z2[j]];
                pair += df.iter().zip(&du).map(|(p, q)| p * q).sum::<f64>();
                norm += du.iter().map(|v| v * v).sum::<f64>();
            }
            pair / norm
        }
        Witness::Terminal { first, second, .. } => {
            (m.phi(0, *first) - m.phi(0, *second)) * (first - second) / (first - second).powi(2)
        }
        other => panic!("unexpected witness {other:?}"),
    }
}

#[test]
fn h4_linear_bounded_by_operator_norm() {
    let m = model(row(0.3, -1.0, 0.2, 2.0, 0.5, 0.0, 1.0), row(0.0, 1.5, -0.4, 0.1, -2.0, 0.3, 0.0), row(0.7, 0.0, 0.0, -0.6, 0.2, 1.1, -3.0), 0.5);
    let op = coefficient_matrix(&m).svd(false, false).singular_values.max();
    let rep = check_h4(&m, &sampler(20000));
    let c = rep.lipschitz.unwrap();
    assert!(c <= op + 1e-9, "estimate {c} vs norm {op}");
    assert!(c >= 0.5 * op, "estimate {c} far below norm {op}");
    assert!(rep.pass && !rep.non_lipschitz_trend);
    assert_eq!(rep.n_samples, 20000);
    assert_eq!(rep.radius, 10.0);
}

#[test]
fn h4_constant_is_zero() {
    let m = AffineCoupled {
        b: row(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0),
        phi_const: 3.0,
        ..AffineCoupled::zero(1)
    };
    assert_eq!(check_h4(&m, &sampler(1000)).lipschitz, Some(0.0));
}

struct Quadratic;

impl CoupledModel for Quadratic {
    fn noise_dim(&self) -> usize {
        1
    }
    fn x0(&self, _i: usize) -> f64 {
        0.0
    }
    fn b(&self, _at: At, _law: &EnsembleSnapshot, own: &State) -> f64 {
        own.x * own.x
    }
    fn sigma(&self, _at: At, _law: &EnsembleSnapshot, _own: &State, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn f(&self, _at: At, _law: &EnsembleSnapshot, _own: &State) -> f64 {
        0.0
    }
    fn phi(&self, _i: usize, x: f64) -> f64 {
        x
    }
}

#[test]
fn h4_quadratic_flags_trend() {
    let rep = check_h4(&Quadratic, &sampler(20000));
    let (a, b) = rep.radius_trend.unwrap();
    assert!(b > 1.5 * a, "trend {a} -> {b}");
    assert!(rep.non_lipschitz_trend && !rep.pass);
}

#[test]
fn h5_canonical_pair() {
    let m = model(row(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0), 1.0);
    let rep = check_h5(&m, &sampler(5000));
    assert!(rep.pass);
    assert!((rep.c1.unwrap() - 1.0).abs() < 1e-12);
    assert!((rep.mu1.unwrap() - 1.0).abs() < 1e-12);
    assert!(!check_h6(&m, &sampler(500)).pass);
}

#[test]
fn h5_sign_flip_has_witness() {
    let m = model(row(0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0), 1.0);
    let rep = check_h5(&m, &sampler(500));
    assert!(!rep.pass && rep.violations > 0);
    let w = rep.witness.expect("witness");
    // The witness is a genuine violation of the decreasing inequality.
    assert!(reevaluate(&m, &w) >= 0.0);
}

#[test]
fn h6_mirror_examples() {
    let plus = model(row(0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0), -1.0);
    let rep = check_h6(&plus, &sampler(5000));
    assert!(rep.pass);
    assert!((rep.c1.unwrap() - 1.0).abs() < 1e-12);
    assert!((rep.mu1.unwrap() - 1.0).abs() < 1e-12);

    let minus = model(row(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0), row(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0), 1.0);
    let rep = check_h6(&minus, &sampler(500));
    assert!(!rep.pass && rep.witness.is_some());
}

#[test]
fn homotopy_endpoint_is_canonical() {
    for m in [
        AffineCoupled::zero(1),
        model(row(5.0, -3.0, 0.0, -7.0, 2.0, 1.0, 4.0), row(1.0, 8.0, 0.0, 9.0, 3.0, -2.0, 0.0), row(0.0, 2.0, 1.0, 0.0, 0.0, 3.0, 1.0), -4.0),
    ] {
        let blend = homotopy_coefficients(&m, 0.0).unwrap();
        let rep = check_h5(&blend, &sampler(5000));
        assert!(rep.pass);
        assert!(rep.c1.unwrap() >= 1.0 - 1e-9, "c1 = {:?}", rep.c1);
    }
}

#[test]
fn convexity_examples() {
    let s = sampler(5000);
    assert!(check_convexity(|v: &[f64]| v[0] * v[0], &[0.0], &s).pass);
    let rep = check_convexity(|v: &[f64]| -v[0] * v[0], &[0.0], &s);
    assert!(!rep.pass);
    match rep.witness {
        Some(Witness::Midpoint { first, second, gap }) => {
            let f = |x: f64| -x * x;
            let g = f(0.5 * (first[0] + second[0])) - 0.5 * (f(first[0]) + f(second[0]));
            assert!((g - gap).abs() < 1e-9 && g > 0.0);
        }
        other => panic!("expected midpoint witness, got {other:?}"),
    }
}

#[test]
fn lq1_hamiltonian_is_convex() {
    let m = lq1_model(&Lq1Params::default()).unwrap();
    let at = TimeGrid::new(1.0, 4).unwrap().at(1);
    let base = Point { at, i: 0, mx: 0.0, my: 0.0, mz: 0.0, x: 0.0, y: 0.0, z: 0.0, v: 0.0, w: 0.0 };
    for (p, q, big_q) in [(1.0, -0.5, 0.3), (-2.0, 1.0, -1.0)] {
        let h = |a: &[f64]| hamiltonian(&m, &base.with_args(a), p, q, big_q);
        let rep = check_convexity(h, &[0.0; 7], &sampler(20000));
        assert!(rep.pass, "{rep:?}");
    }
}

#[test]
fn checks_are_deterministic_under_parallelism() {
    let m = model(row(0.3, 0.1, 0.0, 1.0, 0.0, 0.2, 0.0), row(0.1, -0.5, 0.2, 0.0, -1.0, 0.0, 0.0), row(0.0, 0.0, -0.2, 0.1, 0.0, -1.0, 0.0), 1.0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = check_h5(&m, &sampler(2000));
    let b = pool.install(|| check_h5(&m, &sampler(2000)));
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn violations_are_genuine(coefs in prop::collection::vec(-1.0f64..1.0, 18), phi in -1.0f64..1.0) {
        let r = |i: usize| row(coefs[i], coefs[i + 1], coefs[i + 2], coefs[i + 3], coefs[i + 4], coefs[i + 5], 0.0);
        let m = model(r(0), r(6), r(12), phi);
        let s = Sampler { nested: 4, ..sampler(300) };
        for (rep, sign) in [(check_h5(&m, &s), -1.0), (check_h6(&m, &s), 1.0)] {
            if let Some(w) = rep.witness {
                // Coefficient values are oriented by `sign`, terminal values by `-sign`.
                let (value, orient) = match &w {
                    Witness::Coefficients { value, .. } => (*value, sign),
                    Witness::Terminal { value, .. } => (*value, -sign),
                    other => panic!("unexpected witness {other:?}"),
                };
                prop_assert!(value <= 0.0);
                prop_assert!((orient * reevaluate(&m, &w) - value).abs() <= 1e-9 * (1.0 + value.abs()));
                prop_assert!(rep.violations > 0 && !rep.pass);
            } else {
                prop_assert!(rep.pass);
            }
        }
    }

    #[test]
    fn lipschitz_never_exceeds_norm(coefs in prop::collection::vec(-2.0f64..2.0, 18)) {
        let r = |i: usize| row(coefs[i], coefs[i + 1], coefs[i + 2], coefs[i + 3], coefs[i + 4], coefs[i + 5], 0.0);
        let m = model(r(0), r(6), r(12), 0.0);
        let op = coefficient_matrix(&m).svd(false, false).singular_values.max();
        let c = check_h4(&m, &sampler(500)).lipschitz.unwrap();
        prop_assert!(c <= op * (1.0 + 1e-12) + 1e-9);
    }
}
