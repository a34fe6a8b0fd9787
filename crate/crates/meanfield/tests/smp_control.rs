use meanfield::core::*;
use meanfield::fbsde_solver::SolutionTriple;
use meanfield::hypothesis_check::Sampler;
use meanfield::lq_examples::*;
use meanfield::smp_control::*;
use proptest::prelude::*;

fn quad(x0: f64, b: AffineTerm, sigma: AffineTerm, f: AffineTerm) -> AffineQuadratic {
    AffineQuadratic {
        x0,
        b,
        sigma,
        f,
        control_weight: 1.0.into(),
        terminal_weight: 0.0,
        initial_weight: 0.0,
        terminal_slope: 0.0,
        bounds: None,
        exogenous: None,
    }
}

fn setup(t: f64, m: usize, n: usize, seed: u64) -> (TimeGrid, BrownianPaths) {
    let grid = TimeGrid::new(t, m).unwrap();
    let noise = sample_brownian(&grid, &EnsembleConfig::new(n, 1, seed).unwrap());
    (grid, noise)
}

/// Costs `h`, `g`, `gamma` of the inner model multiplied by `scale`.
struct Scaled<'a> {
    inner: &'a AffineQuadratic,
    scale: f64,
}

impl ControlModel for Scaled<'_> {
    fn coupled(&self) -> bool {
        self.inner.coupled()
    }
    fn x0(&self, i: usize) -> f64 {
        self.inner.x0(i)
    }
    fn b(&self, p: &Point) -> Dual {
        self.inner.b(p)
    }
    fn sigma(&self, p: &Point) -> Dual {
        self.inner.sigma(p)
    }
    fn f(&self, p: &Point) -> Dual {
        self.inner.f(p)
    }
    fn h(&self, p: &Point) -> Dual {
        self.inner.h(p).scaled(self.scale)
    }
    fn phi(&self, x: f64) -> (f64, f64) {
        self.inner.phi(x)
    }
    fn g(&self, x: f64) -> (f64, f64) {
        let (v, d) = self.inner.g(x);
        (self.scale * v, self.scale * d)
    }
    fn gamma(&self, y: f64) -> (f64, f64) {
        let (v, d) = self.inner.gamma(y);
        (self.scale * v, self.scale * d)
    }
    fn bounds(&self) -> (f64, f64) {
        self.inner.bounds()
    }
}

fn lq1() -> AffineQuadratic {
    lq1_model(&Lq1Params::default()).unwrap()
}

fn lq1_with_backward() -> AffineQuadratic {
    lq1_model(&Lq1Params {
        f_mx: 0.1.into(),
        f_x: 0.2.into(),
        f_my: 0.2.into(),
        f_y: 0.3.into(),
        f_mz: 0.05.into(),
        f_z: 0.1.into(),
        f_v: 0.4.into(),
        ..Lq1Params::default()
    })
    .unwrap()
}

#[test]
fn zero_model_gives_zero_state() {
    let model = quad(0.0, AffineTerm::default(), AffineTerm::default(), AffineTerm::default());
    let (grid, noise) = setup(1.0, 8, 64, 1);
    let u = ControlProcess::constant(9, 64, 0.7);
    let s = solve_state(&model, &u, &grid, &noise, &ControlOptions::default(), None).unwrap();
    for p in [&s.x, &s.y, &s.z] {
        assert!(p.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn quadrature_of_constant_running_cost() {
    // h = v^2 with the v^2 / 2 convention.
    let model = AffineQuadratic { control_weight: 2.0.into(), ..quad(0.0, AffineTerm::default(), AffineTerm::default(), AffineTerm::default()) };
    let (grid, noise) = setup(1.0, 64, 32, 2);
    let u = ControlProcess::constant(65, 32, 1.0);
    let c = cost(&model, &u, &grid, &noise, &ControlOptions::default()).unwrap();
    assert!((c.value - 1.0).abs() < 1e-12, "cost {}", c.value);
    assert_eq!(c.se, 0.0);
}

#[test]
fn lq1_state_mean_follows_moment_ode() {
    let model = lq1();
    let (grid, noise) = setup(1.0, 64, 4096, 3);
    let u = ControlProcess::zeros(65, 4096);
    let s = solve_state(&model, &u, &grid, &noise, &ControlOptions::default(), None).unwrap();
    // dE[X] = (A~ + A) E[X] dt with A~ + A = -0.2.
    for k in 0..=64 {
        let exact = (-0.2 * grid.t(k)).exp();
        assert!((s.x.mean(k)[0] - exact).abs() < 5e-3, "node {k}: {} vs {exact}", s.x.mean(k)[0]);
    }
}

#[test]
fn classical_forward_matches_plain_euler() {
    let model = lq1_model(&Lq1Params { b_mx: 0.0.into(), ..Lq1Params::default() }).unwrap();
    let (grid, noise) = setup(1.0, 16, 40, 4);
    let u = ControlProcess::constant(17, 40, 0.3);
    let s = solve_state(&model, &u, &grid, &noise, &ControlOptions::default(), None).unwrap();
    for i in 0..40 {
        let mut x = 1.0f64;
        for k in 0..16 {
            x = x + (-0.3 * x + 0.3) * grid.dt + (0.2 * x + 0.5 * 0.3) * noise.dw(k, i)[0];
            assert_eq!(s.x.get(k + 1, i), x);
        }
    }
}

#[test]
fn zero_costs_give_zero_adjoint() {
    let lq = lq1_with_backward();
    let model = quad(1.0, lq.b.clone(), lq.sigma.clone(), lq.f.clone());
    let (grid, noise) = setup(1.0, 16, 256, 5);
    let u = ControlProcess::zeros(17, 256);
    let opts = ControlOptions::default();
    let s = solve_state(&model, &u, &grid, &noise, &opts, None).unwrap();
    let a = solve_adjoint(&model, &u, &s, &grid, &noise, &opts, None).unwrap();
    for p in [&a.p, &a.q, &a.big_q] {
        assert!(p.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn lq1_adjoint_boundary_values_and_forward_equation() {
    let model = lq1_with_backward();
    let (grid, noise) = setup(1.0, 32, 1024, 6);
    let n = 1024;
    let u = ControlProcess::zeros(33, n);
    let opts = ControlOptions::default();
    let s = solve_state(&model, &u, &grid, &noise, &opts, None).unwrap();
    let a = solve_adjoint(&model, &u, &s, &grid, &noise, &opts, None).unwrap();
    for i in 0..n {
        assert!((a.big_q.get(0, i) + s.y.get(0, i)).abs() < 1e-12);
        assert!((a.p.get(32, i) - (s.x.get(32, i) - a.big_q.get(32, i))).abs() < 1e-12);
    }
    // dQ = (b~ E[Q] + b Q) dt + (beta~ E[Q] + beta Q) dW, Euler on the same increments.
    let (bt, b, btt, bz) = (0.2, 0.3, 0.05, 0.1);
    let mut q: Vec<f64> = (0..n).map(|i| a.big_q.get(0, i)).collect();
    for k in 0..32 {
        let e = q.iter().sum::<f64>() / n as f64;
        q = (0..n)
            .map(|i| q[i] + (bt * e + b * q[i]) * grid.dt + (btt * e + bz * q[i]) * noise.dw(k, i)[0])
            .collect();
        for i in 0..n {
            assert!((a.big_q.get(k + 1, i) - q[i]).abs() < 1e-10 * (1.0 + q[i].abs()), "node {} particle {i}", k + 1);
        }
    }
}

fn at(t: f64) -> Point {
    Point { at: At { k: 0, t }, i: 0, mx: 0.0, my: 0.0, mz: 0.0, x: 0.0, y: 0.0, z: 0.0, v: 0.0, w: 0.0 }
}

#[test]
fn hamiltonian_examples() {
    let b = AffineTerm { constant: 2.0.into(), ..Default::default() };
    let model = quad(0.0, b, AffineTerm::default(), AffineTerm::default());
    assert_eq!(hamiltonian(&model, &at(0.3), 1.0, 0.0, 0.0), 2.0);

    let zero = quad(0.0, AffineTerm::default(), AffineTerm::default(), AffineTerm::default());
    assert_eq!(hamiltonian(&zero, &at(0.0), 0.0, 0.0, 0.0), 0.0);

    // H_v = p B + q D - Q E + v vanishes at v = Q E - p B - q D.
    let model = lq1_with_backward();
    let (bb, dd, ee) = (1.0, 0.5, 0.4);
    for (p, q, qq) in [(0.3, -0.7, 1.1), (-2.0, 0.4, 0.0), (0.0, 0.0, -1.5)] {
        let pt = Point { x: 0.8, mx: 0.6, v: -0.25, ..at(0.5) };
        let hv = hamiltonian_v(&model, &pt, p, q, qq);
        assert!((hv - (p * bb + q * dd - qq * ee + pt.v)).abs() < 1e-14);
        let star = Point { v: qq * ee - p * bb - q * dd, ..pt };
        assert!(hamiltonian_v(&model, &star, p, q, qq).abs() < 1e-14);
    }
}

fn variational_setup() -> (AffineQuadratic, TimeGrid, BrownianPaths, ControlProcess, SolutionTriple) {
    let model = lq1_with_backward();
    let (grid, noise) = setup(1.0, 16, 1024, 7);
    let u = ControlProcess::constant(17, 1024, 0.2);
    let s = solve_state(&model, &u, &grid, &noise, &ControlOptions::default(), None).unwrap();
    (model, grid, noise, u, s)
}

#[test]
fn variational_zero_direction() {
    let (model, grid, noise, u, s) = variational_setup();
    let d = ControlProcess::zeros(17, 1024);
    let v = solve_variational(&model, &u, &d, &s, &grid, &noise, &ControlOptions::default()).unwrap();
    for p in [&v.k, &v.m, &v.n] {
        assert!(p.data().iter().all(|x| x.abs() < 1e-14));
    }
}

#[test]
fn variational_boundary_values() {
    let (model, grid, noise, u, s) = variational_setup();
    let d = affine_control(&grid, [0.5, -1.0, 0.3], &s.x);
    let v = solve_variational(&model, &u, &d, &s, &grid, &noise, &ControlOptions::default()).unwrap();
    for i in 0..1024 {
        assert_eq!(v.k.get(0, i), 0.0);
        // Phi = x, so m_T = k_T.
        assert!((v.m.get(16, i) - v.k.get(16, i)).abs() < 1e-14);
    }
}

#[test]
fn variational_matches_finite_differences() {
    let (model, grid, noise, u, s) = variational_setup();
    let opts = ControlOptions::default();
    let d = affine_control(&grid, [0.5, -1.0, 0.3], &s.x);
    let v = solve_variational(&model, &u, &d, &s, &grid, &noise, &opts).unwrap();
    // The variational solve regresses on (X, k, d); the state solves must condition on the same
    // span, otherwise the difference quotient picks up the change of basis.
    let wide = ControlOptions { max_factors: 2, ..opts.clone() };
    let base = u.clone().add_factors(&[&v.k, &d.values], 2);
    let s = solve_state(&model, &base, &grid, &noise, &wide, None).unwrap();
    for theta in [1e-2, 1e-3] {
        let ut = u.combine(1.0, &d, theta, 0).add_factors(&[&v.k, &d.values], 2);
        let st = solve_state(&model, &ut, &grid, &noise, &wide, None).unwrap();
        let fd = |a: &PathProcess, b: &PathProcess| {
            let mut q = a.clone();
            q.axpy(-1.0, b);
            q.scale(1.0 / theta);
            q
        };
        let e = [fd(&st.x, &s.x).rms_diff(&v.k), fd(&st.y, &s.y).rms_diff(&v.m), fd(&st.z, &s.z).rms_diff(&v.n)];
        let worst = e.iter().copied().fold(0.0, f64::max);
        // The model is affine, so on a fixed basis the quotient is exact up to rounding.
        assert!(worst <= 10.0 * theta && worst < 1e-9, "theta {theta}: errors {e:?}");
    }
}

#[test]
fn gradient_matches_finite_difference_of_cost() {
    let model = lq1();
    let (grid, noise) = setup(1.0, 32, 4096, 8);
    let opts = ControlOptions::default();
    let u = ControlProcess::zeros(33, 4096);
    let g = smp_gradient(&model, &u, &grid, &noise, &opts).unwrap();
    for c in [[1.0, 0.0, 0.0], [0.3, -1.0, 0.5], [0.0, 0.0, 1.0]] {
        let d = affine_control(&grid, c, &g.state.x);
        let pair = pairing(&g.grad, &d.values, &grid).0;
        let fd = finite_difference(&model, &u, &g.state, &d, 1e-4, &grid, &noise, &opts).unwrap();
        assert!((pair - fd).abs() <= 0.01 * fd.abs(), "direction {c:?}: pairing {pair}, fd {fd}");
    }
}

fn zero_cost_model() -> AffineQuadratic {
    let lq = lq1_with_backward();
    quad(1.0, lq.b.clone(), lq.sigma.clone(), lq.f.clone())
}

#[test]
fn zero_cost_gradient_and_residual_vanish() {
    let inner = zero_cost_model();
    let model = Scaled { inner: &inner, scale: 0.0 };
    let (grid, noise) = setup(1.0, 16, 256, 9);
    let opts = ControlOptions::default();
    let u = ControlProcess::constant(17, 256, 0.4);
    let g = smp_gradient(&model, &u, &grid, &noise, &opts).unwrap();
    assert!(g.grad.data().iter().all(|v| *v == 0.0));
    let trials = random_trials(&model, &u, &g.state.x, &grid, 10, &[0.1, 1.0], 3, 0);
    let vi = variational_inequality_residual(&model, &u, &trials, &grid, &noise, &opts).unwrap();
    assert_eq!(vi.residual, 0.0);
}

#[test]
fn gradient_scales_with_costs() {
    let inner = lq1_with_backward();
    let (grid, noise) = setup(1.0, 16, 1024, 10);
    let opts = ControlOptions::default();
    let s0 = solve_state(&inner, &ControlProcess::zeros(17, 1024), &grid, &noise, &opts, None).unwrap();
    let u = affine_control(&grid, [0.2, 0.1, -0.3], &s0.x);
    let g1 = smp_gradient(&Scaled { inner: &inner, scale: 1.0 }, &u, &grid, &noise, &opts).unwrap();
    let lambda = 2.5;
    let gl = smp_gradient(&Scaled { inner: &inner, scale: lambda }, &u, &grid, &noise, &opts).unwrap();
    for (a, b) in g1.grad.data().iter().zip(gl.grad.data()) {
        assert!((lambda * a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{} vs {b}", lambda * a);
    }
}

#[test]
fn residuals_agree_in_sign_at_zero_control() {
    let model = lq1();
    let (grid, noise) = setup(1.0, 32, 2048, 11);
    let opts = ControlOptions::default();
    let u = ControlProcess::zeros(33, 2048);
    let g = smp_gradient(&model, &u, &grid, &noise, &opts).unwrap();
    let trials = random_trials(&model, &u, &g.state.x, &grid, 50, &[0.05, 0.2, 0.5], 5, 0);
    let vi = vi_from_gradient(&u, &g.grad, &trials, &grid);
    assert!(vi.residual < -3.0 * vi.se, "residual {} se {}", vi.residual, vi.se);
    assert!(projected_residual(&model, &u, &g.grad, 0.5) > 0.1);
}

/// `dX = (v - 2) dt`, `h = v^2 / 2`, `g = x^2`, `U = [0, 1]`, `T = 1`.
fn box_model() -> AffineQuadratic {
    let b = AffineTerm { v: 1.0.into(), constant: (-2.0).into(), ..Default::default() };
    AffineQuadratic { terminal_weight: 1.0, bounds: Some((0.0, 1.0)), ..quad(0.0, b, AffineTerm::default(), AffineTerm::default()) }
}

#[test]
fn box_constraint_pins_to_boundary() {
    // Scalar oracle: J(v) = v^2 / 2 + (v - 2)^2 for constant v, minimized at 4/3.
    let j = |v: f64| 0.5 * v * v + (v - 2.0) * (v - 2.0);
    let unconstrained = 4.0 / 3.0;
    assert!(j(unconstrained) < j(unconstrained - 1e-3) && j(unconstrained) < j(unconstrained + 1e-3));
    let oracle = unconstrained.clamp(0.0, 1.0);

    let model = box_model();
    let (grid, noise) = setup(1.0, 16, 32, 12);
    let opts = ControlOptions::default();
    let res = projected_gradient_descent(
        &model,
        &ControlProcess::zeros(17, 32),
        &grid,
        &noise,
        &opts,
        &DescentOptions { tol: 1e-8, ..Default::default() },
    )
    .unwrap();
    assert!(res.converged);
    for k in 0..16 {
        assert!(res.control.values.row(k).iter().all(|v| (v - oracle).abs() < 1e-8), "node {k}");
    }
    let g = smp_gradient(&model, &res.control, &grid, &noise, &opts).unwrap();
    assert!(projected_residual(&model, &res.control, &g.grad, 0.5) <= 1e-8);
    // KKT at the upper bound: the gradient pushes outward.
    assert!(g.grad.row(0).iter().all(|v| *v < 0.0));
    assert!((res.cost.value - j(oracle)).abs() < 1e-10, "cost {}", res.cost.value);
}

#[test]
fn descent_from_candidate_stays_put() {
    let model = lq1();
    let (grid, noise) = setup(1.0, 16, 1024, 13);
    let opts = ControlOptions::default();
    let cand = feedback_candidate(&model, &grid, &noise, &opts, &CandidateOptions { tol: 1e-9, ..Default::default() }).unwrap();
    let j0 = cost_along(&model, &cand.control, &cand.state, &grid);
    let res = projected_gradient_descent(
        &model,
        &cand.control,
        &grid,
        &noise,
        &opts,
        &DescentOptions { tol: 1e-6, max_iter: 5, ..Default::default() },
    )
    .unwrap();
    assert!(res.history.iter().all(|h| h.backtracks <= 1), "{:?}", res.history);
    assert!(res.cost.value >= j0.value - 3.0 * j0.se);
    assert!(res.cost.value <= j0.value + 1e-9);
}

#[test]
fn concave_toy_fails_sufficiency() {
    let inner = lq1();
    let model = Scaled { inner: &inner, scale: -1.0 };
    let (grid, noise) = setup(1.0, 8, 256, 14);
    let u = ControlProcess::zeros(9, 256);
    let sampler = Sampler { radius: 1.0, n_samples: 2000, seed: 3, ..Default::default() };
    let r = check_sufficiency(&model, &u, &grid, &noise, &ControlOptions::default(), &sampler).unwrap();
    assert!(!r.pass);
    assert!(!r.hamiltonian.pass);
    assert!(first_witness(&r).is_some());
}

#[test]
fn lq1_candidate_satisfies_sufficiency() {
    let model = lq1();
    let (grid, noise) = setup(1.0, 16, 1024, 15);
    let opts = ControlOptions::default();
    let cand = feedback_candidate(&model, &grid, &noise, &opts, &CandidateOptions::default()).unwrap();
    let sampler = Sampler { radius: 2.0, n_samples: 4000, seed: 4, ..Default::default() };
    let r = check_sufficiency(&model, &cand.control, &grid, &noise, &opts, &sampler).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn duality_zero_model() {
    let model = quad(0.0, AffineTerm::default(), AffineTerm::default(), AffineTerm::default());
    let (grid, noise) = setup(1.0, 8, 64, 16);
    let u = ControlProcess::zeros(9, 64);
    let d = ControlProcess::constant(9, 64, 1.0);
    let r = duality_gap(&model, &u, &d, &grid, &noise, &ControlOptions::default()).unwrap();
    assert_eq!(r.defect, 0.0);
}

#[test]
fn classical_forward_duality() {
    // f ignores (y, z); the forward part of the identity is exact up to the time step.
    let model = lq1_model(&Lq1Params { f_x: 0.3.into(), f_mx: 0.1.into(), f_v: 0.2.into(), ..Lq1Params::default() }).unwrap();
    let (grid, noise) = setup(1.0, 64, 1024, 17);
    let opts = ControlOptions::default();
    let u = ControlProcess::zeros(65, 1024);
    let s = solve_state(&model, &u, &grid, &noise, &opts, None).unwrap();
    let d = affine_control(&grid, [0.5, -0.5, 0.5], &s.x);
    let r = duality_gap(&model, &u, &d, &grid, &noise, &opts).unwrap();
    let scale = r.lhs.abs().max(r.rhs.abs()).max(1.0);
    assert!(r.defect <= 1e-3 * scale, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projection_is_idempotent(v in -10.0f64..10.0, lo in -2.0f64..0.0, w in 0.0f64..3.0) {
        let model = AffineQuadratic { bounds: Some((lo, lo + w)), ..box_model() };
        let p = model.project(v);
        prop_assert_eq!(model.project(p), p);
        prop_assert!(p >= lo && p <= lo + w);
    }

    #[test]
    fn variational_is_linear_in_direction(c0 in -1.0f64..1.0, c1 in -1.0f64..1.0, c2 in -1.0f64..1.0, s in -3.0f64..3.0) {
        let model = lq1_with_backward();
        let (grid, noise) = setup(1.0, 8, 128, 18);
        let opts = ControlOptions::default();
        let u = ControlProcess::constant(9, 128, 0.1);
        let st = solve_state(&model, &u, &grid, &noise, &opts, None).unwrap();
        let d = affine_control(&grid, [c0, c1, c2], &st.x);
        let mut ds = d.clone();
        ds.values.scale(s);
        let v1 = solve_variational(&model, &u, &d, &st, &grid, &noise, &opts).unwrap();
        let v2 = solve_variational(&model, &u, &ds, &st, &grid, &noise, &opts).unwrap();
        for (a, b) in [(&v1.k, &v2.k), (&v1.m, &v2.m), (&v1.n, &v2.n)] {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((s * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn gradient_scaling_covariance(lambda in 0.1f64..10.0, seed in 0u64..1000) {
        let inner = lq1();
        let (grid, noise) = setup(1.0, 8, 128, seed);
        let opts = ControlOptions::default();
        let u = ControlProcess::constant(9, 128, -0.2);
        let g1 = smp_gradient(&Scaled { inner: &inner, scale: 1.0 }, &u, &grid, &noise, &opts).unwrap();
        let gl = smp_gradient(&Scaled { inner: &inner, scale: lambda }, &u, &grid, &noise, &opts).unwrap();
        for (a, b) in g1.grad.data().iter().zip(gl.grad.data()) {
            prop_assert!((lambda * a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}
