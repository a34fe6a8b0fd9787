use meanfield::core::*;
use meanfield::games::*;
use meanfield::lq_examples::*;
use meanfield::smp_control::*;

const N: usize = 512;
const M: usize = 16;

fn setup(seed: u64) -> (TimeGrid, BrownianPaths) {
    let grid = TimeGrid::new(1.0, M).unwrap();
    let noise = sample_brownian(&grid, &EnsembleConfig::new(N, 1, seed).unwrap());
    (grid, noise)
}

fn lq1() -> AffineQuadratic {
    lq1_model(&Lq1Params::default()).unwrap()
}

fn zeros() -> ControlProcess {
    ControlProcess::zeros(M + 1, N)
}

fn descent() -> DescentOptions {
    DescentOptions { tol: 1e-4, ..DescentOptions::default() }
}

/// Player model with every cost switched off.
struct NoCost(AffineQuadratic);

impl ControlModel for NoCost {
    fn coupled(&self) -> bool {
        self.0.coupled()
    }
    fn x0(&self, i: usize) -> f64 {
        self.0.x0(i)
    }
    fn b(&self, p: &Point) -> Dual {
        self.0.b(p)
    }
    fn sigma(&self, p: &Point) -> Dual {
        self.0.sigma(p)
    }
    fn f(&self, p: &Point) -> Dual {
        self.0.f(p)
    }
    fn h(&self, _p: &Point) -> Dual {
        Dual::constant(0.0)
    }
    fn phi(&self, x: f64) -> (f64, f64) {
        self.0.phi(x)
    }
    fn g(&self, _x: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn gamma(&self, _y: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn exogenous(&self) -> Option<&ControlProcess> {
        self.0.exogenous()
    }
}

struct NoCostGame(AffineGame);

impl GameModel for NoCostGame {
    type Player<'a> = NoCost;
    fn player<'a>(&'a self, i: usize, opponent: &ControlProcess) -> NoCost {
        NoCost(self.0.player(i, opponent))
    }
}

#[test]
fn zero_costs_give_zero_adjoint_whatever_the_opponent() {
    let mut game = AffineGame::copies(&lq1(), 0.3);
    game.players[0].terminal_weight = 0.0;
    game.players[0].initial_weight = 0.0;
    let (grid, noise) = setup(1);
    let opts = ControlOptions::default();
    for other in [0.0, 0.7, -1.3] {
        let controls = [zeros(), ControlProcess::constant(M + 1, N, other)];
        let s = player_state(&game, 0, &controls, &grid, &noise, &opts).unwrap();
        let a = player_adjoint(&game, 0, &controls, &s, &grid, &noise, &opts).unwrap();
        for p in [&a.p, &a.q, &a.big_q] {
            assert!(p.data().iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn symmetric_game_has_identical_adjoints() {
    let game = AffineGame::copies(&lq1(), 0.1);
    let (grid, noise) = setup(2);
    let opts = ControlOptions::default();
    let u = ControlProcess::constant(M + 1, N, 0.25);
    let controls = [u.clone(), u];
    let s0 = player_state(&game, 0, &controls, &grid, &noise, &opts).unwrap();
    let s1 = player_state(&game, 1, &controls, &grid, &noise, &opts).unwrap();
    assert_eq!(s0, s1);
    let a0 = player_adjoint(&game, 0, &controls, &s0, &grid, &noise, &opts).unwrap();
    let a1 = player_adjoint(&game, 1, &controls, &s1, &grid, &noise, &opts).unwrap();
    assert_eq!(a0, a1);
}

#[test]
fn independent_copies_match_the_control_problem() {
    let model = lq1();
    let game = AffineGame::copies(&model, 0.0);
    let (grid, noise) = setup(3);
    let opts = ControlOptions::default();
    let controls = [ControlProcess::constant(M + 1, N, 0.2), ControlProcess::constant(M + 1, N, -0.4)];
    let s = player_state(&game, 0, &controls, &grid, &noise, &opts).unwrap();
    let a = player_adjoint(&game, 0, &controls, &s, &grid, &noise, &opts).unwrap();
    let s_ref = solve_state(&model, &controls[0], &grid, &noise, &opts, None).unwrap();
    let a_ref = solve_adjoint(&model, &controls[0], &s_ref, &grid, &noise, &opts, None).unwrap();
    assert_eq!(s, s_ref);
    assert_eq!(a, a_ref);

    let br = best_response(&game, 1, &controls[0], &zeros(), &grid, &noise, &opts, &descent()).unwrap();
    let pgd = projected_gradient_descent(&model, &zeros(), &grid, &noise, &opts, &descent()).unwrap();
    assert_eq!(br.control, pgd.control);
    assert_eq!(br.history, pgd.history);
}

#[test]
fn best_response_without_own_influence_stays_put() {
    let mut game = AffineGame::copies(&lq1(), 0.5);
    for t in [&mut game.players[0].b, &mut game.players[0].sigma, &mut game.players[0].f] {
        t.v = 0.0.into();
    }
    let (grid, noise) = setup(4);
    let opts = ControlOptions::default();
    let opponent = ControlProcess::constant(M + 1, N, 0.6);
    let br = best_response(&game, 0, &opponent, &zeros(), &grid, &noise, &opts, &descent()).unwrap();
    assert_eq!(br.control, zeros());
    assert_eq!(br.history.len(), 1);
}

#[test]
fn independent_copies_converge_in_one_round() {
    let model = lq1();
    let game = AffineGame::copies(&model, 0.0);
    let (grid, noise) = setup(5);
    let opts = ControlOptions::default();
    let nopts = NashOptions { damping: 1.0, ..NashOptions::default() };
    let res = nash_iterate(&game, &[zeros(), zeros()], &grid, &noise, &opts, &nopts).unwrap();
    assert!(res.converged);
    assert_eq!(res.history.len(), 1);
    // Player 1's cost does not depend on player 0, so player 0's iterate is plain descent.
    let pgd = projected_gradient_descent(&model, &zeros(), &grid, &noise, &opts, &nopts.descent).unwrap();
    assert_eq!(res.controls[0], pgd.control);
    assert_eq!(res.controls[0], res.controls[1]);

    let dev = game_deviation_test(&game, &res.controls, 30, &[0.05, 0.2, 0.5], 3.0, 9, &grid, &noise, &opts).unwrap();
    assert!(dev.pass, "{dev:?}");

    // Pushing player 0 away from its optimum is caught.
    let mut pushed = res.controls.clone();
    pushed[0] = pushed[0].combine(1.0, &ControlProcess::constant(M + 1, N, 1.0), 0.5, 0);
    let dev = game_deviation_test(&game, &pushed, 30, &[0.05, 0.2, 0.5], 3.0, 9, &grid, &noise, &opts).unwrap();
    assert!(!dev.pass);
    assert!(!dev.players[0].pass);
    let w = dev.players[0].witness.unwrap();
    assert!(dev.players[0].changes[w] < dev.players[0].threshold);
}

#[test]
fn symmetric_initialization_stays_symmetric() {
    let game = AffineGame::copies(&lq1(), 0.1);
    let (grid, noise) = setup(6);
    let opts = ControlOptions::default();
    let nopts = NashOptions { damping: 1.0, rounds: 20, ..NashOptions::default() };
    let res = nash_iterate(&game, &[zeros(), zeros()], &grid, &noise, &opts, &nopts).unwrap();
    assert!(res.converged);
    assert_eq!(res.controls[0], res.controls[1]);
    for r in &res.history {
        assert_eq!(r.costs[0], r.costs[1]);
        assert_eq!(r.changes[0], r.changes[1]);
    }
}

#[test]
fn zero_cost_game_deviations_are_neutral() {
    let game = NoCostGame(AffineGame::copies(&lq1(), 0.2));
    let (grid, noise) = setup(7);
    let opts = ControlOptions::default();
    let controls = [ControlProcess::constant(M + 1, N, 0.1), zeros()];
    let dev = game_deviation_test(&game, &controls, 10, &[0.1, 1.0], 3.0, 1, &grid, &noise, &opts).unwrap();
    assert!(dev.pass);
    for p in &dev.players {
        assert!(p.changes.iter().all(|c| *c == 0.0));
    }
}

#[test]
fn nash_rejects_bad_inputs() {
    let game = AffineGame::copies(&lq1(), 0.1);
    let (grid, noise) = setup(8);
    let opts = ControlOptions::default();
    let nopts = NashOptions { damping: 0.0, ..NashOptions::default() };
    assert!(nash_iterate(&game, &[zeros(), zeros()], &grid, &noise, &opts, &nopts).is_err());
    let controls = [zeros(), zeros()];
    assert!(player_state(&game, 2, &controls, &grid, &noise, &opts).is_err());
}
