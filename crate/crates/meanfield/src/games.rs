//! Two-player non-zero-sum games on mean-field FBSDEs: per-player adjoints, best responses,
//! damped best-response iteration and Nash certification.
//!
//! A game is described through each player's induced control problem: player `i` controls
//! `v_i` and sees the opponent's control as the exogenous input `Point::w`.

use serde::{Deserialize, Serialize};

use crate::core::{BrownianPaths, TimeGrid};
use crate::error::{Error, Result};
use crate::fbsde_solver::SolutionTriple;
use crate::lq_examples::AffineQuadratic;
use crate::smp_control::{
    cost_along, deviation_test, gradient_along, projected_gradient_descent, random_trials, solve_adjoint,
    solve_state, vi_from_gradient, AdjointTriple, ControlModel, ControlOptions, ControlProcess,
    CostEstimate, DescentOptions, DescentRecord, DeviationSummary, ViReport,
};

pub trait GameModel: Sync {
    type Player<'a>: ControlModel
    where
        Self: 'a;

    /// Player `i`'s problem with the opponent's control fixed.
    fn player<'a>(&'a self, i: usize, opponent: &ControlProcess) -> Self::Player<'a>;
}

/// Both players' views as affine-quadratic models; `input` coefficients carry the opponent's
/// control. A shared state appears twice with the roles of `v` and `input` swapped; a
/// product state gives each player its own subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineGame {
    pub players: [AffineQuadratic; 2],
}

impl AffineGame {
    /// Two copies of `model` whose drifts read the opponent's control with weight `coupling`.
    pub fn copies(model: &AffineQuadratic, coupling: f64) -> Self {
        let mut m = model.clone();
        m.b.input = coupling.into();
        m.exogenous = None;
        AffineGame { players: [m.clone(), m] }
    }

    pub fn validate(&self) -> Result<()> {
        self.players.iter().try_for_each(|p| p.validate())
    }
}

impl GameModel for AffineGame {
    type Player<'a> = AffineQuadratic;

    fn player<'a>(&'a self, i: usize, opponent: &ControlProcess) -> AffineQuadratic {
        self.players[i].clone().with_exogenous(opponent.clone())
    }
}

fn check_player(i: usize) -> Result<()> {
    if i > 1 {
        return Err(Error::config(format!("player index must be 0 or 1, got {i}")));
    }
    Ok(())
}

/// The state of player `i`'s problem under `controls`.
pub fn player_state<G: GameModel>(
    game: &G,
    i: usize,
    controls: &[ControlProcess; 2],
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<SolutionTriple> {
    check_player(i)?;
    let model = game.player(i, &controls[1 - i]);
    solve_state(&model, &controls[i], grid, noise, opts, None)
}

pub fn player_adjoint<G: GameModel>(
    game: &G,
    i: usize,
    controls: &[ControlProcess; 2],
    state: &SolutionTriple,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<AdjointTriple> {
    check_player(i)?;
    let model = game.player(i, &controls[1 - i]);
    solve_adjoint(&model, &controls[i], state, grid, noise, opts, None)
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub control: ControlProcess,
    pub history: Vec<DescentRecord>,
    pub stagnated: bool,
    pub cost: CostEstimate,
}

/// Projected gradient descent on player `i`'s problem, started from `start`.
#[allow(clippy::too_many_arguments)]
pub fn best_response<G: GameModel>(
    game: &G,
    i: usize,
    opponent: &ControlProcess,
    start: &ControlProcess,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
    descent: &DescentOptions,
) -> Result<BestResponse> {
    check_player(i)?;
    let model = game.player(i, opponent);
    let res = projected_gradient_descent(&model, start, grid, noise, opts, descent)?;
    Ok(BestResponse { control: res.control, history: res.history, stagnated: res.stagnated, cost: res.cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashOptions {
    pub rounds: usize,
    pub damping: f64,
    /// Residual acceptance `r_i >= -n_se * SE(J_i)`.
    pub n_se: f64,
    pub trials: usize,
    pub trial_scales: Vec<f64>,
    pub seed: u64,
    pub descent: DescentOptions,
    /// Rounds with non-decreasing residual that count as oscillation.
    pub patience: usize,
}

impl Default for NashOptions {
    fn default() -> Self {
        NashOptions {
            rounds: 50,
            damping: 0.5,
            n_se: 3.0,
            trials: 50,
            trial_scales: vec![0.05, 0.2, 0.5],
            seed: 7,
            descent: DescentOptions { tol: 1e-4, ..DescentOptions::default() },
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlayerCertificate {
    pub cost: CostEstimate,
    pub residual: ViReport,
    /// `residual >= -n_se * SE(J_i)`
    pub pass: bool,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashRound {
    pub round: usize,
    /// Worst-player residual shortfall `max_i max(0, -r_i - eps_i)`.
    pub shortfall: f64,
    pub residuals: [f64; 2],
    pub costs: [f64; 2],
    /// RMS change of each control over the round.
    pub changes: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct NashResult {
    pub controls: [ControlProcess; 2],
    pub certificates: [PlayerCertificate; 2],
    pub history: Vec<NashRound>,
    pub converged: bool,
}

/// Residual certificate for player `i` at `controls`.
#[allow(clippy::too_many_arguments)]
pub fn player_certificate<G: GameModel>(
    game: &G,
    i: usize,
    controls: &[ControlProcess; 2],
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
    nopts: &NashOptions,
) -> Result<(PlayerCertificate, SolutionTriple)> {
    check_player(i)?;
    let model = game.player(i, &controls[1 - i]);
    let u = &controls[i];
    let state = solve_state(&model, u, grid, noise, opts, None)?;
    let adj = solve_adjoint(&model, u, &state, grid, noise, opts, None)?;
    let grad = gradient_along(&model, u, &state, &adj, grid);
    let trials = random_trials(
        &model,
        u,
        &state.x,
        grid,
        nopts.trials,
        &nopts.trial_scales,
        nopts.seed ^ (i as u64 + 1),
        opts.max_factors,
    );
    let residual = vi_from_gradient(u, &grad, &trials, grid);
    let cost = cost_along(&model, u, &state, grid);
    let tolerance = nopts.n_se * cost.se;
    let pass = residual.residual >= -tolerance;
    Ok((PlayerCertificate { cost, residual, pass, tolerance }, state))
}

/// Damped simultaneous best responses `u_i <- (1 - lambda) u_i + lambda BR_i(u_{-i})`, until
/// both residual certificates pass. Each round uses the previous round's pair for both
/// players, so symmetric games stay symmetric.
pub fn nash_iterate<G: GameModel>(
    game: &G,
    init: &[ControlProcess; 2],
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
    nopts: &NashOptions,
) -> Result<NashResult> {
    if !(nopts.damping > 0.0 && nopts.damping <= 1.0) {
        return Err(Error::config("damping must lie in (0, 1]"));
    }
    for i in 0..2 {
        if !init[i].is_admissible(&game.player(i, &init[1 - i])) {
            return Err(Error::config(format!("initial control of player {i} is not admissible")));
        }
    }
    let mut controls = init.clone();
    let mut history: Vec<NashRound> = Vec::new();
    for round in 1..=nopts.rounds {
        let mut next = controls.clone();
        let mut changes = [0.0; 2];
        for i in 0..2 {
            let br = best_response(game, i, &controls[1 - i], &controls[i], grid, noise, opts, &nopts.descent)?;
            let model = game.player(i, &controls[1 - i]);
            let mixed = controls[i]
                .combine(1.0 - nopts.damping, &br.control, nopts.damping, opts.max_factors)
                .projected(&model);
            changes[i] = mixed.rms_diff(&controls[i]);
            next[i] = mixed;
        }
        controls = next;
        let c0 = player_certificate(game, 0, &controls, grid, noise, opts, nopts)?.0;
        let c1 = player_certificate(game, 1, &controls, grid, noise, opts, nopts)?.0;
        let certs = [c0, c1];
        let shortfall = certs
            .iter()
            .map(|c| (-c.residual.residual - c.tolerance).max(0.0))
            .fold(0.0, f64::max);
        history.push(NashRound {
            round,
            shortfall,
            residuals: [certs[0].residual.residual, certs[1].residual.residual],
            costs: [certs[0].cost.value, certs[1].cost.value],
            changes,
        });
        if certs.iter().all(|c| c.pass) {
            return Ok(NashResult { controls, certificates: certs, history, converged: true });
        }
        let p = nopts.patience;
        if p > 0 && history.len() > p {
            let tail = &history[history.len() - p - 1..];
            if tail.windows(2).all(|w| w[1].shortfall >= w[0].shortfall) {
                return Err(Error::NonConvergence {
                    what: "best-response iteration (oscillating residuals)".into(),
                    history: history.iter().map(|r| r.shortfall).collect(),
                });
            }
        }
    }
    Err(Error::NonConvergence {
        what: "best-response iteration".into(),
        history: history.iter().map(|r| r.shortfall).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameDeviationReport {
    pub players: [DeviationSummary; 2],
    pub pass: bool,
}

/// Unilateral deviations for each player with the opponent held at the candidate.
#[allow(clippy::too_many_arguments)]
pub fn game_deviation_test<G: GameModel>(
    game: &G,
    controls: &[ControlProcess; 2],
    n_deviations: usize,
    scales: &[f64],
    n_se: f64,
    seed: u64,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<GameDeviationReport> {
    let mut out = Vec::with_capacity(2);
    for i in 0..2 {
        let model = game.player(i, &controls[1 - i]);
        let u = &controls[i];
        let state = solve_state(&model, u, grid, noise, opts, None)?;
        let devs = random_trials(&model, u, &state.x, grid, n_deviations, scales, seed ^ (0x100 + i as u64), opts.max_factors);
        out.push(deviation_test(&model, u, &state, &devs, n_se, grid, noise, opts)?);
    }
    let players: [DeviationSummary; 2] = [out.remove(0), out.remove(0)];
    let pass = players.iter().all(|p| p.pass);
    Ok(GameDeviationReport { players, pass })
}
