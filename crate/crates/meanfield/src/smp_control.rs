//! Stochastic maximum principle for mean-field FBSDE control: state, adjoint and variational
//! solves, the Hamiltonian gradient, projected gradient descent and optimality checks.
//!
//! Scalar state and control with one Brownian motion. Coefficients depend on the law through
//! the means `(E[X], E[Y], E[Z])`; partial derivatives are supplied analytically as
//! [`Dual`] values with respect to `(E[X], E[Y], E[Z], X, Y, Z, v)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{mean, At, BrownianPaths, EnsembleSnapshot, PathProcess, State, TimeGrid};
use crate::error::{Error, Result};
use crate::fbsde_solver::{
    regression_state, solve_continuation, ContinuationOptions, ContinuationSchedule, CoupledModel,
    Negated, SolutionTriple,
};
use crate::forward_mv::{simulate_forward, ForwardModel};
use crate::hypothesis_check::{check_convexity, check_h6, ConvexityReport, Sampler, Witness};
use crate::mf_bsde::{node_projector, solve_mf_bsde, BackwardModel, BsdeOptions, RegressionBasis};

pub const MX: usize = 0;
pub const MY: usize = 1;
pub const MZ: usize = 2;
pub const X: usize = 3;
pub const Y: usize = 4;
pub const Z: usize = 5;
pub const V: usize = 6;

/// Evaluation point of a coefficient. `w` is an exogenous input (zero unless the model is
/// driven by another control, as in games).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub at: At,
    pub i: usize,
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub v: f64,
    pub w: f64,
}

impl Point {
    pub fn args(&self) -> [f64; 7] {
        [self.mx, self.my, self.mz, self.x, self.y, self.z, self.v]
    }

    pub fn with_args(&self, a: &[f64]) -> Point {
        Point { mx: a[0], my: a[1], mz: a[2], x: a[3], y: a[4], z: a[5], v: a[6], ..*self }
    }
}

/// Value with its gradient in `(mx, my, mz, x, y, z, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub value: f64,
    pub grad: [f64; 7],
}

impl Dual {
    pub fn constant(value: f64) -> Self {
        Dual { value, grad: [0.0; 7] }
    }

    /// `c + sum_j coef_j * arg_j`.
    pub fn affine(c: f64, coef: [f64; 7], p: &Point) -> Self {
        let a = p.args();
        Dual { value: c + coef.iter().zip(&a).map(|(k, v)| k * v).sum::<f64>(), grad: coef }
    }

    pub fn scaled(self, s: f64) -> Self {
        Dual { value: s * self.value, grad: self.grad.map(|g| s * g) }
    }
}

pub trait ControlModel: Sync {
    /// Whether `b` and `sigma` read `(E[Y], E[Z], Y, Z)`.
    fn coupled(&self) -> bool;
    fn x0(&self, i: usize) -> f64;
    fn b(&self, p: &Point) -> Dual;
    fn sigma(&self, p: &Point) -> Dual;
    fn f(&self, p: &Point) -> Dual;
    fn h(&self, p: &Point) -> Dual;
    /// `(Phi(x), Phi'(x))`
    fn phi(&self, x: f64) -> (f64, f64);
    fn g(&self, x: f64) -> (f64, f64);
    fn gamma(&self, y: f64) -> (f64, f64);
    /// Interval `U`.
    fn bounds(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
    /// Input process read into `Point::w`.
    fn exogenous(&self) -> Option<&ControlProcess> {
        None
    }

    fn project(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds();
        v.clamp(lo, hi)
    }
}

impl<M: ControlModel + ?Sized> ControlModel for &M {
    fn coupled(&self) -> bool {
        (**self).coupled()
    }
    fn x0(&self, i: usize) -> f64 {
        (**self).x0(i)
    }
    fn b(&self, p: &Point) -> Dual {
        (**self).b(p)
    }
    fn sigma(&self, p: &Point) -> Dual {
        (**self).sigma(p)
    }
    fn f(&self, p: &Point) -> Dual {
        (**self).f(p)
    }
    fn h(&self, p: &Point) -> Dual {
        (**self).h(p)
    }
    fn phi(&self, x: f64) -> (f64, f64) {
        (**self).phi(x)
    }
    fn g(&self, x: f64) -> (f64, f64) {
        (**self).g(x)
    }
    fn gamma(&self, y: f64) -> (f64, f64) {
        (**self).gamma(y)
    }
    fn bounds(&self) -> (f64, f64) {
        (**self).bounds()
    }
    fn exogenous(&self) -> Option<&ControlProcess> {
        (**self).exogenous()
    }
}

/// Open-loop control `u[k][i]`. `factors` are paths the control is a function of beyond the
/// state it drives; they are added to every regression state so that conditional expectations
/// stay Markovian.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProcess {
    pub values: PathProcess,
    pub factors: Option<PathProcess>,
}

impl ControlProcess {
    pub fn zeros(nodes: usize, particles: usize) -> Self {
        ControlProcess { values: PathProcess::zeros(nodes, particles, 1), factors: None }
    }

    pub fn constant(nodes: usize, particles: usize, value: f64) -> Self {
        ControlProcess { values: PathProcess::constant(nodes, particles, value), factors: None }
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values.get(k, i)
    }

    pub fn nodes(&self) -> usize {
        self.values.nodes()
    }

    pub fn particles(&self) -> usize {
        self.values.particles()
    }

    /// `a * self + b * other`, keeping both factor sets.
    pub fn combine(&self, a: f64, other: &ControlProcess, b: f64, max_factors: usize) -> ControlProcess {
        let mut values = self.values.clone();
        values.scale(a);
        values.axpy(b, &other.values);
        let factors = merge_factors(&[self.factors.as_ref(), other.factors.as_ref()], max_factors);
        ControlProcess { values, factors }
    }

    pub fn projected<M: ControlModel + ?Sized>(mut self, model: &M) -> ControlProcess {
        self.values.data_mut().iter_mut().for_each(|v| *v = model.project(*v));
        self
    }

    pub fn is_admissible<M: ControlModel + ?Sized>(&self, model: &M) -> bool {
        let (lo, hi) = model.bounds();
        self.values.data().iter().all(|v| v.is_finite() && *v >= lo && *v <= hi)
    }

    /// Controls on nodes `0..M` drive the dynamics; node `M` is carried for shape only.
    pub fn rms_diff(&self, other: &ControlProcess) -> f64 {
        let len = (self.nodes() - 1) * self.particles();
        let (a, b) = (&self.values.data()[..len], &other.values.data()[..len]);
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / len as f64).sqrt()
    }

    pub fn add_factors(mut self, extra: &[&PathProcess], max_factors: usize) -> ControlProcess {
        let mut parts: Vec<Option<&PathProcess>> = extra.iter().map(|p| Some(*p)).collect();
        parts.push(self.factors.as_ref());
        self.factors = merge_factors(&parts, max_factors);
        self
    }
}

/// Components whose part orthogonal to the factors already kept is below this fraction of
/// their norm are dropped; rescaling such a sliver to unit variance would only add noise.
pub const FACTOR_TOL: f64 = 1e-2;

/// Orthonormal span of the given factor sets, newest first.
pub fn merge_factors(parts: &[Option<&PathProcess>], max_factors: usize) -> Option<PathProcess> {
    let present: Vec<&PathProcess> = parts.iter().flatten().copied().collect();
    if present.is_empty() || max_factors == 0 {
        return None;
    }
    let stacked = PathProcess::hstack(&present).ok()?;
    Some(stacked.reduce_span(max_factors, FACTOR_TOL))
}

/// Control affine in time and a reference path: `c0 + c1 t + c2 r_t`.
pub fn affine_control(grid: &TimeGrid, c: [f64; 3], reference: &PathProcess) -> ControlProcess {
    let n = reference.particles();
    let mut values = PathProcess::zeros(grid.steps + 1, n, 1);
    for k in 0..=grid.steps {
        let t = grid.t(k);
        for i in 0..n {
            values.set(k, i, c[0] + c[1] * t + c[2] * reference.get(k, i));
        }
    }
    ControlProcess { values, factors: Some(reference.reduce_span(1, FACTOR_TOL)) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlOptions {
    /// Backward regressions of the decoupled solves.
    pub bsde: BsdeOptions,
    /// Coupled solves from scratch.
    pub schedule: ContinuationSchedule,
    /// Coupled solves started from a nearby solution.
    pub warm_schedule: ContinuationSchedule,
    pub continuation: ContinuationOptions,
    /// Control factors added to regression states. Extra regressors fitted on the same sample
    /// bias the in-sample cost downwards, so the default conditions on the state alone.
    pub max_factors: usize,
}

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions {
            bsde: BsdeOptions { basis: RegressionBasis::linear(), inner_passes: 1 },
            schedule: ContinuationSchedule::uniform(1.0, 1e-10, 400).expect("valid schedule"),
            warm_schedule: ContinuationSchedule::uniform(1.0, 1e-10, 400).expect("valid schedule"),
            continuation: ContinuationOptions { anderson: 5, ..ContinuationOptions::default() },
            max_factors: 0,
        }
    }
}

fn check_noise(grid: &TimeGrid, noise: &BrownianPaths, u: &ControlProcess) -> Result<()> {
    if noise.dim() != 1 {
        return Err(Error::config("control problems use one Brownian motion"));
    }
    noise.check(grid, u.particles())?;
    if u.nodes() != grid.steps + 1 {
        return Err(Error::config("control does not match the time grid"));
    }
    Ok(())
}

fn input<M: ControlModel + ?Sized>(model: &M, k: usize, i: usize) -> f64 {
    model.exogenous().map_or(0.0, |w| w.get(k, i))
}

/// `extra` regressors are always kept; at most `max` control factors are added after them.
fn state_factors<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    extra: &[&PathProcess],
    max: usize,
) -> Option<PathProcess> {
    let mut parts: Vec<Option<&PathProcess>> = extra.iter().map(|p| Some(*p)).collect();
    parts.push(u.factors.as_ref());
    parts.push(model.exogenous().and_then(|w| w.factors.as_ref()));
    merge_factors(&parts, extra.len() + max)
}

/// The state system under a fixed control, as a coupled model.
pub struct ControlledSystem<'a, M: ?Sized> {
    model: &'a M,
    u: &'a ControlProcess,
    factors: Option<PathProcess>,
}

impl<'a, M: ControlModel + ?Sized> ControlledSystem<'a, M> {
    pub fn new(model: &'a M, u: &'a ControlProcess, max_factors: usize) -> Self {
        ControlledSystem { model, u, factors: state_factors(model, u, &[], max_factors) }
    }

    fn point(&self, at: At, law: &EnsembleSnapshot, own: &State) -> Point {
        Point {
            at,
            i: own.i,
            mx: law.mean_x,
            my: law.mean_y,
            mz: law.mean_z.first().copied().unwrap_or(0.0),
            x: own.x,
            y: own.y,
            z: own.z.first().copied().unwrap_or(0.0),
            v: self.u.get(at.k, own.i),
            w: input(self.model, at.k, own.i),
        }
    }
}

impl<M: ControlModel + ?Sized> CoupledModel for ControlledSystem<'_, M> {
    fn noise_dim(&self) -> usize {
        1
    }
    fn x0(&self, i: usize) -> f64 {
        self.model.x0(i)
    }
    fn b(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.model.b(&self.point(at, law, own)).value
    }
    fn sigma(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        out[0] = self.model.sigma(&self.point(at, law, own)).value;
    }
    fn f(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.model.f(&self.point(at, law, own)).value
    }
    fn phi(&self, _i: usize, x: f64) -> f64 {
        self.model.phi(x).0
    }
    fn factors(&self) -> Option<&PathProcess> {
        self.factors.as_ref()
    }
}

impl<M: ControlModel + ?Sized> ForwardModel for ControlledSystem<'_, M> {
    fn initial(&self, i: usize) -> f64 {
        self.model.x0(i)
    }
    fn drift(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        let zero = [0.0];
        let st = State { i: own.i, x: own.x, y: 0.0, z: &zero };
        let mut l = law.clone();
        l.mean_y = 0.0;
        l.mean_z = vec![0.0];
        self.model.b(&self.point(at, &l, &st)).value
    }
    fn diffusion(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        let zero = [0.0];
        let st = State { i: own.i, x: own.x, y: 0.0, z: &zero };
        let mut l = law.clone();
        l.mean_y = 0.0;
        l.mean_z = vec![0.0];
        out[0] = self.model.sigma(&self.point(at, &l, &st)).value;
    }
}

/// Backward part of the decoupled state; the regression state is not `X`, so the forward
/// path is read directly.
struct StateBackward<'a, M: ?Sized> {
    model: &'a M,
    u: &'a ControlProcess,
    x: &'a PathProcess,
}

impl<M: ControlModel + ?Sized> BackwardModel for StateBackward<'_, M> {
    fn terminal(&self, i: usize, _x: f64) -> f64 {
        self.model.phi(self.x.get(self.x.nodes() - 1, i)).0
    }
    fn law_stats(&self, at: At, _law: &EnsembleSnapshot) -> Vec<f64> {
        vec![mean(self.x.row(at.k))]
    }
    fn driver(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        let p = Point {
            at,
            i: own.i,
            mx: law.stats[0],
            my: law.mean_y,
            mz: law.mean_z[0],
            x: self.x.get(at.k, own.i),
            y: own.y,
            z: own.z[0],
            v: self.u.get(at.k, own.i),
            w: input(self.model, at.k, own.i),
        };
        self.model.f(&p).value
    }
}

/// Decoupled: Euler forward sweep, then the backward regression. Coupled: continuation on the
/// control-augmented system, started from `warm` when given.
pub fn solve_state<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
    warm: Option<&SolutionTriple>,
) -> Result<SolutionTriple> {
    check_noise(grid, noise, u)?;
    if !u.is_admissible(model) {
        return Err(Error::config("control leaves the admissible set"));
    }
    let sys = ControlledSystem::new(model, u, opts.max_factors);
    if model.coupled() {
        let schedule = if warm.is_some() { &opts.warm_schedule } else { &opts.schedule };
        let (sol, _) = solve_continuation(&sys, grid, noise, schedule, &opts.continuation, warm)?;
        return Ok(sol);
    }
    let x = simulate_forward(&sys, grid, noise)?;
    let cond = regression_state(&x, sys.factors.as_ref());
    let back = StateBackward { model, u, x: &x };
    let (y, z) = solve_mf_bsde(&back, grid, noise, &cond, &opts.bsde)?;
    Ok(SolutionTriple { x, y, z })
}

/// Coefficient gradients along a trajectory.
#[derive(Debug, Clone, Copy, Default)]
pub struct NodePartials {
    pub b: Dual,
    pub sigma: Dual,
    pub f: Dual,
    pub h: Dual,
}

/// Pointwise evaluation of the model along `(state, u)`.
pub struct Trajectory<'a, M: ?Sized> {
    pub model: &'a M,
    pub u: &'a ControlProcess,
    pub state: &'a SolutionTriple,
    means: Vec<[f64; 3]>,
    pub grid: TimeGrid,
}

impl<'a, M: ControlModel + ?Sized> Trajectory<'a, M> {
    pub fn new(model: &'a M, u: &'a ControlProcess, state: &'a SolutionTriple, grid: &TimeGrid) -> Self {
        let means = (0..state.x.nodes())
            .map(|k| [mean(state.x.row(k)), mean(state.y.row(k)), mean(state.z.row(k))])
            .collect();
        Trajectory { model, u, state, means, grid: *grid }
    }

    pub fn point(&self, k: usize, i: usize) -> Point {
        let m = self.means[k];
        Point {
            at: self.grid.at(k),
            i,
            mx: m[0],
            my: m[1],
            mz: m[2],
            x: self.state.x.get(k, i),
            y: self.state.y.get(k, i),
            z: self.state.z.get(k, i),
            v: self.u.get(k, i),
            w: input(self.model, k, i),
        }
    }

    pub fn partials(&self, k: usize, i: usize) -> NodePartials {
        let p = self.point(k, i);
        NodePartials { b: self.model.b(&p), sigma: self.model.sigma(&p), f: self.model.f(&p), h: self.model.h(&p) }
    }

    fn node(&self, k: usize) -> Vec<NodePartials> {
        (0..self.state.x.particles()).into_par_iter().map(|i| self.partials(k, i)).collect()
    }
}

/// `(p, q, Q)` together with the one-step predictor `p_pred[k] = E[p_{k+1} | F_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTriple {
    pub p: PathProcess,
    pub q: PathProcess,
    pub big_q: PathProcess,
    pub p_pred: PathProcess,
    /// Set when the adjoint system fails the sampled reversed-monotonicity check.
    pub warning: Option<String>,
}

/// Explicit backward regression `p_k = P_k[p_{k+1}] + dt F(k, i, P_k[p_{k+1}], q_k)` with
/// `q_k = P_k[(p_{k+1} - P_k p_{k+1}) dW_k] / dt`. `driver` receives the node's predictor and
/// `q` rows. Returns `(p, q, predictor)`.
fn explicit_backward<F>(
    grid: &TimeGrid,
    noise: &BrownianPaths,
    cond: &PathProcess,
    basis: &RegressionBasis,
    terminal: Vec<f64>,
    driver: F,
) -> Result<(PathProcess, PathProcess, PathProcess)>
where
    F: Fn(usize, &[f64], &[f64]) -> Vec<f64>,
{
    let n = noise.particles();
    let m = grid.steps;
    let mut p = PathProcess::zeros(m + 1, n, 1);
    let mut q = PathProcess::zeros(m + 1, n, 1);
    let mut pred = PathProcess::zeros(m + 1, n, 1);
    p.row_mut(m).copy_from_slice(&terminal);
    pred.row_mut(m).copy_from_slice(&terminal);
    let mut target = vec![0.0; n];
    for k in (0..m).rev() {
        let proj = node_projector(basis, cond, k)?;
        let next = p.row(k + 1).to_vec();
        let pc = proj.project(&next);
        for i in 0..n {
            target[i] = (next[i] - pc[i]) * noise.dw(k, i)[0];
        }
        let qk: Vec<f64> = proj.project(&target).iter().map(|v| v / grid.dt).collect();
        let drv = driver(k, &pc, &qk);
        for i in 0..n {
            let v = pc[i] + grid.dt * drv[i];
            if !v.is_finite() {
                return Err(Error::NumericalDomain { what: "adjoint backward step".into(), particle: i });
            }
            p.set(k, i, v);
        }
        q.row_mut(k).copy_from_slice(&qk);
        pred.row_mut(k).copy_from_slice(&pc);
    }
    let last = q.row(m - 1).to_vec();
    q.row_mut(m).copy_from_slice(&last);
    Ok((p, q, pred))
}

// Sequential so the result does not depend on the thread count.
fn avg(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    (0..n).map(f).sum::<f64>() / n as f64
}

/// Coupled adjoint with forward component `Q` and backward pair `(p, q)`. Monotone in the
/// reversed sense when the state system is monotone.
pub struct AdjointSystem<'a, M: ?Sized> {
    tr: &'a Trajectory<'a, M>,
    partials: Vec<Vec<NodePartials>>,
    factors: Option<PathProcess>,
}

impl<'a, M: ControlModel + ?Sized> AdjointSystem<'a, M> {
    pub fn new(tr: &'a Trajectory<'a, M>, max_factors: usize) -> Self {
        let partials = (0..tr.state.x.nodes()).map(|k| tr.node(k)).collect();
        let factors = state_factors(tr.model, tr.u, &[&tr.state.x], max_factors);
        AdjointSystem { tr, partials, factors }
    }
}

// law_stats layout
const S_BMX_P: usize = 0;
const S_SMX_Q: usize = 1;
const S_FMX_Q: usize = 2;
const S_HMX: usize = 3;
const S_BMY_P: usize = 4;
const S_SMY_Q: usize = 5;
const S_FMY_Q: usize = 6;
const S_HMY: usize = 7;
const S_BMZ_P: usize = 8;
const S_SMZ_Q: usize = 9;
const S_FMZ_Q: usize = 10;
const S_HMZ: usize = 11;

impl<M: ControlModel + ?Sized> AdjointSystem<'_, M> {
    fn np(&self, k: usize, j: usize) -> &NodePartials {
        let row = &self.partials[k];
        &row[j % row.len()]
    }
}

impl<M: ControlModel + ?Sized> CoupledModel for AdjointSystem<'_, M> {
    fn noise_dim(&self) -> usize {
        1
    }
    fn x0(&self, i: usize) -> f64 {
        -self.tr.model.gamma(self.tr.state.y.get(0, i)).1
    }
    fn law_stats(&self, at: At, law: &EnsembleSnapshot) -> Vec<f64> {
        let n = law.len();
        let k = at.k;
        let mut s = vec![0.0; 12];
        for j in 0..n {
            let np = self.np(k, j);
            let (qq, p, q) = (law.x[j], law.y[j], law.z[j]);
            s[S_BMX_P] += np.b.grad[MX] * p;
            s[S_SMX_Q] += np.sigma.grad[MX] * q;
            s[S_FMX_Q] += np.f.grad[MX] * qq;
            s[S_HMX] += np.h.grad[MX];
            s[S_BMY_P] += np.b.grad[MY] * p;
            s[S_SMY_Q] += np.sigma.grad[MY] * q;
            s[S_FMY_Q] += np.f.grad[MY] * qq;
            s[S_HMY] += np.h.grad[MY];
            s[S_BMZ_P] += np.b.grad[MZ] * p;
            s[S_SMZ_Q] += np.sigma.grad[MZ] * q;
            s[S_FMZ_Q] += np.f.grad[MZ] * qq;
            s[S_HMZ] += np.h.grad[MZ];
        }
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        s
    }
    fn b(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        let np = self.np(at.k, own.i);
        let s = &law.stats;
        let (qq, p, q) = (own.x, own.y, own.z[0]);
        s[S_FMY_Q] + np.f.grad[Y] * qq - s[S_BMY_P] - np.b.grad[Y] * p - s[S_SMY_Q] - np.sigma.grad[Y] * q
            - np.h.grad[Y]
            - s[S_HMY]
    }
    fn sigma(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        let np = self.np(at.k, own.i);
        let s = &law.stats;
        let (qq, p, q) = (own.x, own.y, own.z[0]);
        out[0] = s[S_FMZ_Q] + np.f.grad[Z] * qq - s[S_BMZ_P] - np.b.grad[Z] * p - s[S_SMZ_Q]
            - np.sigma.grad[Z] * q
            - np.h.grad[Z]
            - s[S_HMZ];
    }
    fn f(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        let np = self.np(at.k, own.i);
        let s = &law.stats;
        let (qq, p, q) = (own.x, own.y, own.z[0]);
        s[S_BMX_P] + np.b.grad[X] * p + s[S_SMX_Q] + np.sigma.grad[X] * q + np.h.grad[X] + s[S_HMX]
            - s[S_FMX_Q]
            - np.f.grad[X] * qq
    }
    fn phi(&self, i: usize, qq: f64) -> f64 {
        let xt = self.tr.state.x.get(self.tr.state.x.nodes() - 1, i);
        self.tr.model.g(xt).1 - self.tr.model.phi(xt).1 * qq
    }
    fn factors(&self) -> Option<&PathProcess> {
        self.factors.as_ref()
    }
}

/// Decoupled: `Q` forward by Euler from `Q_0 = -gamma'(Y_0)`, then `(p, q)` from the pathwise
/// backward recursion started at `p_T = g'(X_T) - Phi'(X_T) Q_T`, projected on the regression
/// state at each node. Coupled: the joint system is solved by continuation after negating
/// `Q`, which maps the reversed monotonicity onto the usual one.
pub fn solve_adjoint<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    state: &SolutionTriple,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
    warm: Option<&AdjointTriple>,
) -> Result<AdjointTriple> {
    check_noise(grid, noise, u)?;
    let n = u.particles();
    let m = grid.steps;
    let tr = Trajectory::new(model, u, state, grid);

    if model.coupled() {
        let sys = AdjointSystem::new(&tr, opts.max_factors);
        let sampler = Sampler {
            n_samples: 2000,
            nodes: [0, m / 2, m - 1].iter().map(|&k| grid.at(k)).collect(),
            particles: n,
            ..Sampler::default()
        };
        let h6 = check_h6(&sys, &sampler);
        let warning = (!h6.pass).then(|| {
            format!("adjoint system fails the reversed monotonicity check ({} violations)", h6.violations)
        });
        let neg = Negated { inner: &sys };
        let guess = warm.map(|a| {
            let mut x = a.big_q.clone();
            x.scale(-1.0);
            SolutionTriple { x, y: a.p.clone(), z: a.q.clone() }
        });
        let schedule = if guess.is_some() { &opts.warm_schedule } else { &opts.schedule };
        let (sol, _) =
            solve_continuation(&neg, grid, noise, schedule, &opts.continuation, guess.as_ref())?;
        // The control at node k moves node k + 1, so the gradient pairs b_v with E[p_{k+1} | F_k].
        let cond = regression_state(&sol.x, sys.factors.as_ref());
        let mut p_pred = sol.y.clone();
        for k in 0..m {
            let proj = node_projector(&opts.bsde.basis, &cond, k)?;
            p_pred.row_mut(k).copy_from_slice(&proj.project(sol.y.row(k + 1)));
        }
        let mut big_q = sol.x;
        big_q.scale(-1.0);
        return Ok(AdjointTriple { p_pred, p: sol.y, q: sol.z, big_q, warning });
    }
    let partials: Vec<Vec<NodePartials>> = (0..=m).map(|k| tr.node(k)).collect();

    let mut big_q = PathProcess::zeros(m + 1, n, 1);
    for i in 0..n {
        big_q.set(0, i, -model.gamma(state.y.get(0, i)).1);
    }
    for k in 0..m {
        let np = &partials[k];
        let qrow = big_q.row(k).to_vec();
        let e_fmy = avg(n, |j| np[j].f.grad[MY] * qrow[j]);
        let e_fmz = avg(n, |j| np[j].f.grad[MZ] * qrow[j]);
        let e_hmy = avg(n, |j| np[j].h.grad[MY]);
        let e_hmz = avg(n, |j| np[j].h.grad[MZ]);
        for i in 0..n {
            let a = &np[i];
            let drift = e_fmy + a.f.grad[Y] * qrow[i] - a.h.grad[Y] - e_hmy;
            let diff = e_fmz + a.f.grad[Z] * qrow[i] - a.h.grad[Z] - e_hmz;
            big_q.set(k + 1, i, qrow[i] + drift * grid.dt + diff * noise.dw(k, i)[0]);
        }
    }
    let terminal: Vec<f64> = (0..n)
        .map(|i| {
            let xt = state.x.get(m, i);
            model.g(xt).1 - model.phi(xt).1 * big_q.get(m, i)
        })
        .collect();
    let factors = state_factors(model, u, &[&big_q], opts.max_factors);
    let cond = regression_state(&state.x, factors.as_ref());
    // Pathwise adjoint of the Euler scheme, projected per node. Pairings of `p_pred` and `q`
    // with controls in the regression span reproduce the derivative of the discrete cost.
    let mut lam = terminal;
    let mut p = PathProcess::zeros(m + 1, n, 1);
    let mut q = PathProcess::zeros(m + 1, n, 1);
    let mut p_pred = PathProcess::zeros(m + 1, n, 1);
    p.row_mut(m).copy_from_slice(&lam);
    p_pred.row_mut(m).copy_from_slice(&lam);
    let mut target = vec![0.0; n];
    for k in (0..m).rev() {
        let np = &partials[k];
        let proj = node_projector(&opts.bsde.basis, &cond, k)?;
        let dw: Vec<f64> = (0..n).map(|i| noise.dw(k, i)[0]).collect();
        p_pred.row_mut(k).copy_from_slice(&proj.project(&lam));
        (0..n).for_each(|i| target[i] = lam[i] * dw[i]);
        let qk: Vec<f64> = proj.project(&target).iter().map(|v| v / grid.dt).collect();
        q.row_mut(k).copy_from_slice(&qk);
        let qq = big_q.row(k);
        let e_bmx = avg(n, |j| np[j].b.grad[MX] * lam[j]);
        let e_smx = avg(n, |j| np[j].sigma.grad[MX] * lam[j] * dw[j]);
        let e_fmx = avg(n, |j| np[j].f.grad[MX] * qq[j]);
        let e_hmx = avg(n, |j| np[j].h.grad[MX]);
        for i in 0..n {
            let a = &np[i];
            let v = lam[i] * (1.0 + a.b.grad[X] * grid.dt + a.sigma.grad[X] * dw[i])
                + e_bmx * grid.dt
                + e_smx
                + grid.dt * (a.h.grad[X] + e_hmx - e_fmx - a.f.grad[X] * qq[i]);
            if !v.is_finite() {
                return Err(Error::NumericalDomain { what: "adjoint backward step".into(), particle: i });
            }
            lam[i] = v;
        }
        p.row_mut(k).copy_from_slice(&proj.project(&lam));
    }
    let last = q.row(m - 1).to_vec();
    q.row_mut(m).copy_from_slice(&last);
    Ok(AdjointTriple { p, q, big_q, p_pred, warning: None })
}

/// `b p + sigma q - f Q + h`.
pub fn hamiltonian<M: ControlModel + ?Sized>(model: &M, pt: &Point, p: f64, q: f64, big_q: f64) -> f64 {
    model.b(pt).value * p + model.sigma(pt).value * q - model.f(pt).value * big_q + model.h(pt).value
}

/// `H_v` at the same arguments.
pub fn hamiltonian_v<M: ControlModel + ?Sized>(model: &M, pt: &Point, p: f64, q: f64, big_q: f64) -> f64 {
    model.b(pt).grad[V] * p + model.sigma(pt).grad[V] * q - model.f(pt).grad[V] * big_q + model.h(pt).grad[V]
}

#[derive(Debug, Clone)]
pub struct Gradient {
    /// `H_v` per node and particle; node `M` is zero.
    pub grad: PathProcess,
    pub state: SolutionTriple,
    pub adjoint: AdjointTriple,
}

impl Gradient {
    /// RMS of `H_v` over the driving nodes.
    pub fn rms(&self) -> f64 {
        let m = self.grad.nodes() - 1;
        let n = self.grad.particles();
        (self.grad.data()[..m * n].iter().map(|v| v * v).sum::<f64>() / (m * n) as f64).sqrt()
    }
}

/// `H_v` along the trajectory, with `p` taken from the one-step predictor.
pub fn gradient_along<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    state: &SolutionTriple,
    adjoint: &AdjointTriple,
    grid: &TimeGrid,
) -> PathProcess {
    let n = u.particles();
    let m = grid.steps;
    let tr = Trajectory::new(model, u, state, grid);
    let mut grad = PathProcess::zeros(m + 1, n, 1);
    for k in 0..m {
        let row: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let pt = tr.point(k, i);
                hamiltonian_v(model, &pt, adjoint.p_pred.get(k, i), adjoint.q.get(k, i), adjoint.big_q.get(k, i))
            })
            .collect();
        grad.row_mut(k).copy_from_slice(&row);
    }
    grad
}

pub fn smp_gradient<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<Gradient> {
    let state = solve_state(model, u, grid, noise, opts, None)?;
    let adjoint = solve_adjoint(model, u, &state, grid, noise, opts, None)?;
    let grad = gradient_along(model, u, &state, &adjoint, grid);
    Ok(Gradient { grad, state, adjoint })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    /// Standard error of the per-particle cost sample.
    pub se: f64,
}

/// `mean_i [ sum_k h dt + g(X_T) + gamma(Y_0) ]` with left-endpoint quadrature.
pub fn cost_along<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    state: &SolutionTriple,
    grid: &TimeGrid,
) -> CostEstimate {
    let n = u.particles();
    let m = grid.steps;
    let tr = Trajectory::new(model, u, state, grid);
    let per: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let run: f64 = (0..m).map(|k| model.h(&tr.point(k, i)).value).sum::<f64>() * grid.dt;
            run + model.g(state.x.get(m, i)).0 + model.gamma(state.y.get(0, i)).0
        })
        .collect();
    let (value, se) = mean_se(&per);
    CostEstimate { value, se }
}

pub(crate) fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, (var / n).sqrt())
}

pub fn cost<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<CostEstimate> {
    let state = solve_state(model, u, grid, noise, opts, None)?;
    Ok(cost_along(model, u, &state, grid))
}

/// `E sum_k dt <a_k, b_k>` over the driving nodes, with its standard error over particles.
pub fn pairing(a: &PathProcess, b: &PathProcess, grid: &TimeGrid) -> (f64, f64) {
    let n = a.particles();
    let per: Vec<f64> = (0..n)
        .map(|i| (0..grid.steps).map(|k| a.get(k, i) * b.get(k, i)).sum::<f64>() * grid.dt)
        .collect();
    mean_se(&per)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalTriple {
    pub k: PathProcess,
    pub m: PathProcess,
    pub n: PathProcess,
}

/// The linearized state system in `(k, m, n)`.
struct VariationalSystem<'a, M: ?Sized> {
    tr: &'a Trajectory<'a, M>,
    partials: Vec<Vec<NodePartials>>,
    direction: &'a ControlProcess,
    factors: Option<PathProcess>,
}

impl<M: ControlModel + ?Sized> VariationalSystem<'_, M> {
    fn lin(&self, d: &Dual, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        let g = &d.grad;
        g[MX] * law.mean_x
            + g[MY] * law.mean_y
            + g[MZ] * law.mean_z[0]
            + g[X] * own.x
            + g[Y] * own.y
            + g[Z] * own.z[0]
            + g[V] * self.direction.get(at.k, own.i)
    }
}

impl<M: ControlModel + ?Sized> CoupledModel for VariationalSystem<'_, M> {
    fn noise_dim(&self) -> usize {
        1
    }
    fn x0(&self, _i: usize) -> f64 {
        0.0
    }
    fn b(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.lin(&self.partials[at.k][own.i].b, at, law, own)
    }
    fn sigma(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        out[0] = self.lin(&self.partials[at.k][own.i].sigma, at, law, own);
    }
    fn f(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.lin(&self.partials[at.k][own.i].f, at, law, own)
    }
    fn phi(&self, i: usize, x: f64) -> f64 {
        let xt = self.tr.state.x.get(self.tr.state.x.nodes() - 1, i);
        self.tr.model.phi(xt).1 * x
    }
    fn factors(&self) -> Option<&PathProcess> {
        self.factors.as_ref()
    }
}

/// Derivative of the state in the control direction `direction`, along `state`.
pub fn solve_variational<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    direction: &ControlProcess,
    state: &SolutionTriple,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<VariationalTriple> {
    check_noise(grid, noise, u)?;
    let n = u.particles();
    let m = grid.steps;
    let tr = Trajectory::new(model, u, state, grid);
    let partials: Vec<Vec<NodePartials>> = (0..=m).map(|k| tr.node(k)).collect();
    if model.coupled() {
        let factors = state_factors(model, u, &[&state.x, &direction.values], opts.max_factors);
        let sys = VariationalSystem { tr: &tr, partials, direction, factors };
        let (sol, _) = solve_continuation(&sys, grid, noise, &opts.schedule, &opts.continuation, None)?;
        return Ok(VariationalTriple { k: sol.x, m: sol.y, n: sol.z });
    }

    let mut kk = PathProcess::zeros(m + 1, n, 1);
    for k in 0..m {
        let np = &partials[k];
        let row = kk.row(k).to_vec();
        let ek = mean(&row);
        for i in 0..n {
            let a = &np[i];
            let d = direction.get(k, i);
            let drift = a.b.grad[MX] * ek + a.b.grad[X] * row[i] + a.b.grad[V] * d;
            let diff = a.sigma.grad[MX] * ek + a.sigma.grad[X] * row[i] + a.sigma.grad[V] * d;
            kk.set(k + 1, i, row[i] + drift * grid.dt + diff * noise.dw(k, i)[0]);
        }
    }
    let terminal: Vec<f64> = (0..n).map(|i| model.phi(state.x.get(m, i)).1 * kk.get(m, i)).collect();
    let factors = state_factors(model, u, &[&kk, &direction.values], opts.max_factors);
    let cond = regression_state(&state.x, factors.as_ref());
    let (mm, nn, _) = explicit_backward(grid, noise, &cond, &opts.bsde.basis, terminal, |k, mc, nk| {
        let np = &partials[k];
        let (ek, em, en) = (mean(kk.row(k)), mean(mc), mean(nk));
        (0..n)
            .map(|i| {
                let g = &np[i].f.grad;
                g[MX] * ek
                    + g[MY] * em
                    + g[MZ] * en
                    + g[X] * kk.get(k, i)
                    + g[Y] * mc[i]
                    + g[Z] * nk[i]
                    + g[V] * direction.get(k, i)
            })
            .collect()
    })?;
    Ok(VariationalTriple { k: kk, m: mm, n: nn })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityReport {
    /// `E[g'(X_T) k_T + gamma'(Y_0) m_0]`
    pub lhs: f64,
    /// `E sum dt [(p b_v + q sigma_v - Q f_v) d - (k, m, n) . (h_x, h_y, h_z)]`, node values.
    pub rhs: f64,
    pub defect: f64,
}

/// Discrete form of the product-rule identity for `k p + m Q`, evaluated with node values.
/// The defect vanishes at first order in `dt`.
pub fn duality_gap<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    direction: &ControlProcess,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<DualityReport> {
    let state = solve_state(model, u, grid, noise, opts, None)?;
    let adj = solve_adjoint(model, u, &state, grid, noise, opts, None)?;
    let var = solve_variational(model, u, direction, &state, grid, noise, opts)?;
    Ok(duality_from(model, u, direction, &state, &adj, &var, grid))
}

pub fn duality_from<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    direction: &ControlProcess,
    state: &SolutionTriple,
    adj: &AdjointTriple,
    var: &VariationalTriple,
    grid: &TimeGrid,
) -> DualityReport {
    let n = u.particles();
    let m = grid.steps;
    let tr = Trajectory::new(model, u, state, grid);
    let lhs = avg(n, |i| {
        model.g(state.x.get(m, i)).1 * var.k.get(m, i) + model.gamma(state.y.get(0, i)).1 * var.m.get(0, i)
    });
    let mut rhs = 0.0;
    for k in 0..m {
        let np = tr.node(k);
        let (ek, em, en) = (mean(var.k.row(k)), mean(var.m.row(k)), mean(var.n.row(k)));
        let e_h: [f64; 3] = [
            avg(n, |j| np[j].h.grad[MX]),
            avg(n, |j| np[j].h.grad[MY]),
            avg(n, |j| np[j].h.grad[MZ]),
        ];
        let s = avg(n, |i| {
            let a = &np[i];
            let hv = a.b.grad[V] * adj.p.get(k, i) + a.sigma.grad[V] * adj.q.get(k, i)
                - a.f.grad[V] * adj.big_q.get(k, i);
            let hx = a.h.grad[X] * var.k.get(k, i) + a.h.grad[Y] * var.m.get(k, i) + a.h.grad[Z] * var.n.get(k, i);
            hv * direction.get(k, i) - hx
        });
        rhs += grid.dt * (s - e_h[0] * ek - e_h[1] * em - e_h[2] * en);
    }
    DualityReport { lhs, rhs, defect: (lhs - rhs).abs() }
}

/// `(J(u + theta d) - J(u)) / theta` on common noise.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    state: &SolutionTriple,
    direction: &ControlProcess,
    theta: f64,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<f64> {
    let j0 = cost_along(model, u, state, grid).value;
    let v = u.combine(1.0, direction, theta, opts.max_factors);
    let sv = solve_state(model, &v, grid, noise, opts, Some(state))?;
    Ok((cost_along(model, &v, &sv, grid).value - j0) / theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentOptions {
    pub max_iter: usize,
    /// Stop once the RMS projected-gradient residual falls below this.
    pub tol: f64,
    pub eta0: f64,
    pub shrink: f64,
    pub slope: f64,
    pub min_step: f64,
    /// When the line search fails, retry along the gradient regressed on the state.
    pub smooth_fallback: bool,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            max_iter: 200,
            tol: 1e-6,
            eta0: 0.5,
            shrink: 0.5,
            slope: 1e-4,
            min_step: 1e-10,
            smooth_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentRecord {
    pub iteration: usize,
    pub cost: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub backtracks: usize,
}

#[derive(Debug, Clone)]
pub struct DescentResult {
    pub control: ControlProcess,
    pub history: Vec<DescentRecord>,
    pub converged: bool,
    /// The line search ran below `min_step` without sufficient decrease.
    pub stagnated: bool,
    pub cost: CostEstimate,
    pub state: SolutionTriple,
}

/// RMS of `(u - P(u - eta g)) / eta` over the driving nodes.
pub fn projected_residual<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    grad: &PathProcess,
    eta: f64,
) -> f64 {
    let m = u.nodes() - 1;
    let n = u.particles();
    let mut acc = 0.0;
    for k in 0..m {
        for i in 0..n {
            let v = u.get(k, i);
            let r = (v - model.project(v - eta * grad.get(k, i))) / eta;
            acc += r * r;
        }
    }
    (acc / (m * n) as f64).sqrt()
}

fn step_control<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    g: &Gradient,
    eta: f64,
    max_factors: usize,
) -> ControlProcess {
    let mut values = u.values.clone();
    values.data_mut().iter_mut().zip(g.grad.data()).for_each(|(v, d)| *v = model.project(*v - eta * d));
    let factors = merge_factors(
        &[Some(&g.state.x), Some(&g.adjoint.big_q), u.factors.as_ref()],
        max_factors,
    );
    ControlProcess { values, factors }
}

/// Per-node regression of `grad` on the state basis.
fn smooth_gradient(
    grad: &PathProcess,
    x: &PathProcess,
    factors: Option<&PathProcess>,
    basis: &RegressionBasis,
) -> Result<PathProcess> {
    let cond = regression_state(x, factors);
    let mut out = grad.clone();
    for k in 0..grad.nodes() {
        let proj = node_projector(basis, &cond, k)?;
        out.row_mut(k).copy_from_slice(&proj.project(grad.row(k)));
    }
    Ok(out)
}

/// `u <- P(u - eta H_v)` with Armijo backtracking on the common-noise cost.
pub fn projected_gradient_descent<M: ControlModel + ?Sized>(
    model: &M,
    u0: &ControlProcess,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
    descent: &DescentOptions,
) -> Result<DescentResult> {
    if !u0.is_admissible(model) {
        return Err(Error::config("initial control leaves the admissible set"));
    }
    let mut u = u0.clone();
    let mut state = solve_state(model, &u, grid, noise, opts, None)?;
    let mut j = cost_along(model, &u, &state, grid);
    let mut adj_warm: Option<AdjointTriple> = None;
    let mut history = Vec::new();
    // Switched on for good once the raw gradient fails the line search.
    let mut smoothed = false;
    for it in 0..descent.max_iter {
        let adjoint = solve_adjoint(model, &u, &state, grid, noise, opts, adj_warm.as_ref())?;
        let grad = gradient_along(model, &u, &state, &adjoint, grid);
        let mut g = Gradient { grad, state: state.clone(), adjoint };
        if smoothed {
            g.grad = smooth_gradient(&g.grad, &g.state.x, u.factors.as_ref(), &opts.bsde.basis)?;
        }
        let mut eta = descent.eta0;
        let mut backtracks = 0;
        loop {
            let res = projected_residual(model, &u, &g.grad, descent.eta0);
            if res <= descent.tol {
                history.push(DescentRecord { iteration: it, cost: j.value, gradient_norm: res, step: 0.0, backtracks });
                return Ok(DescentResult { control: u, history, converged: true, stagnated: false, cost: j, state });
            }
            let v = step_control(model, &u, &g, eta, opts.max_factors);
            let mut dv = v.values.clone();
            dv.axpy(-1.0, &u.values);
            let decrease = -pairing(&g.grad, &dv, grid).0;
            let sv = solve_state(model, &v, grid, noise, opts, Some(&state))?;
            let jv = cost_along(model, &v, &sv, grid);
            if jv.value <= j.value - descent.slope * decrease {
                history.push(DescentRecord { iteration: it, cost: jv.value, gradient_norm: res, step: eta, backtracks });
                u = v;
                state = sv;
                j = jv;
                break;
            }
            eta *= descent.shrink;
            backtracks += 1;
            if eta < descent.min_step {
                if descent.smooth_fallback && !smoothed {
                    g.grad = smooth_gradient(&g.grad, &g.state.x, u.factors.as_ref(), &opts.bsde.basis)?;
                    smoothed = true;
                    eta = descent.eta0;
                    continue;
                }
                history.push(DescentRecord { iteration: it, cost: j.value, gradient_norm: res, step: 0.0, backtracks });
                return Ok(DescentResult { control: u, history, converged: false, stagnated: true, cost: j, state });
            }
        }
        adj_warm = Some(g.adjoint);
    }
    Ok(DescentResult { control: u, history, converged: false, stagnated: false, cost: j, state })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViReport {
    /// `E sum dt H_v (v_j - u)` per trial.
    pub pairings: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub residual: f64,
    /// Standard error of the minimizing trial.
    pub se: f64,
}

pub fn vi_from_gradient(u: &ControlProcess, grad: &PathProcess, trials: &[ControlProcess], grid: &TimeGrid) -> ViReport {
    let mut pairings = Vec::with_capacity(trials.len());
    let mut ses = Vec::with_capacity(trials.len());
    for v in trials {
        let mut dv = v.values.clone();
        dv.axpy(-1.0, &u.values);
        let (p, se) = pairing(grad, &dv, grid);
        pairings.push(p);
        ses.push(se);
    }
    let (mut residual, mut se) = (0.0, 0.0);
    if let Some((j, _)) = pairings.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
        residual = pairings[j];
        se = ses[j];
    }
    ViReport { pairings, standard_errors: ses, residual, se }
}

/// Minimum over trials of the pairing `E sum dt H_v (v - u)`.
pub fn variational_inequality_residual<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    trials: &[ControlProcess],
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<ViReport> {
    if let Some(bad) = trials.iter().position(|v| !v.is_admissible(model)) {
        return Err(Error::config(format!("trial control {bad} is not admissible")));
    }
    let g = smp_gradient(model, u, grid, noise, opts)?;
    Ok(vi_from_gradient(u, &g.grad, trials, grid))
}

/// Admissible trials `P(u + s (c0 + c1 t + c2 X^u))` with standard normal `c` and scales `s`
/// cycling through `scales`.
pub fn random_trials<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    state_x: &PathProcess,
    grid: &TimeGrid,
    count: usize,
    scales: &[f64],
    seed: u64,
    max_factors: usize,
) -> Vec<ControlProcess> {
    (0..count)
        .map(|j| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let c: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let s = scales[j % scales.len().max(1)];
            let dir = affine_control(grid, c, state_x);
            u.combine(1.0, &dir, s, max_factors).projected(model)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimalityReport {
    pub checks: usize,
    pub violations: usize,
    /// Most negative `H(v) - H(u)` found, with node, particle and trial value.
    pub worst: Option<(f64, usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficiencyReport {
    pub g: ConvexityReport,
    pub gamma: ConvexityReport,
    pub phi: ConvexityReport,
    pub hamiltonian: ConvexityReport,
    pub minimality: MinimalityReport,
    pub pass: bool,
}

/// Convexity of `g`, `gamma`, `Phi` and of `H` in `(mx, my, mz, x, y, z, v)` at adjoint values
/// sampled along the trajectory, and pointwise minimality of `H` at `u` against sampled
/// admissible values.
pub fn check_sufficiency<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
    sampler: &Sampler,
) -> Result<SufficiencyReport> {
    let g = smp_gradient(model, u, grid, noise, opts)?;
    Ok(sufficiency_from(model, u, &g, grid, sampler))
}

pub fn sufficiency_from<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    g: &Gradient,
    grid: &TimeGrid,
    sampler: &Sampler,
) -> SufficiencyReport {
    let n = u.particles();
    let m = grid.steps;
    let tr = Trajectory::new(model, u, &g.state, grid);
    let scalar = |f: &(dyn Fn(f64) -> f64 + Sync)| check_convexity(|a: &[f64]| f(a[0]), &[0.0], sampler);
    let gr = scalar(&|x| model.g(x).0);
    let gm = scalar(&|y| model.gamma(y).0);
    let ph = scalar(&|x| model.phi(x).0);

    let mut rng = ChaCha12Rng::seed_from_u64(sampler.seed ^ 0x5375_6666);
    let picks: Vec<(usize, usize)> = (0..16).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();
    let per = Sampler { n_samples: (sampler.n_samples / picks.len()).max(1), ..sampler.clone() };
    let mut hr = ConvexityReport { violations: 0, witness: None, n_samples: 0, radius: sampler.radius, pass: true };
    for &(k, i) in &picks {
        let pt = tr.point(k, i);
        let (p, q, qq) = (g.adjoint.p.get(k, i), g.adjoint.q.get(k, i), g.adjoint.big_q.get(k, i));
        let r = check_convexity(|a: &[f64]| hamiltonian(model, &pt.with_args(a), p, q, qq), &pt.args(), &per);
        hr.n_samples += r.n_samples;
        hr.violations += r.violations;
        if hr.witness.is_none() {
            hr.witness = r.witness;
        }
    }
    hr.pass = hr.violations == 0;

    let (lo, hi) = model.bounds();
    let checks = sampler.n_samples.min(20_000);
    let results: Vec<(f64, usize, usize, f64)> = (0..checks)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha12Rng::seed_from_u64(sampler.seed ^ 0x6d69_6e69);
            rng.set_stream(s as u64);
            let k = rng.random_range(0..m);
            let i = rng.random_range(0..n);
            let pt = tr.point(k, i);
            let (p, q, qq) = (g.adjoint.p_pred.get(k, i), g.adjoint.q.get(k, i), g.adjoint.big_q.get(k, i));
            let v = (pt.v + rng.random_range(-sampler.radius..=sampler.radius)).clamp(lo, hi);
            let h0 = hamiltonian(model, &pt, p, q, qq);
            let h1 = hamiltonian(model, &Point { v, ..pt }, p, q, qq);
            (h1 - h0, k, i, v)
        })
        .collect();
    let mut mr = MinimalityReport { checks, violations: 0, worst: None };
    for (gap, k, i, v) in results {
        if gap < -1e-6 * (1.0 + (v - u.get(k, i)).abs()) {
            mr.violations += 1;
        }
        if mr.worst.is_none_or(|w| gap < w.0) {
            mr.worst = Some((gap, k, i, v));
        }
    }
    let pass = gr.pass && gm.pass && ph.pass && hr.pass && mr.violations == 0;
    SufficiencyReport { g: gr, gamma: gm, phi: ph, hamiltonian: hr, minimality: mr, pass }
}

/// The first failing convexity witness of a report, if any.
pub fn first_witness(r: &SufficiencyReport) -> Option<&Witness> {
    [&r.g, &r.gamma, &r.phi, &r.hamiltonian].into_iter().find_map(|c| c.witness.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSummary {
    pub base_cost: f64,
    pub base_se: f64,
    /// `J(v_j) - J(u)` per deviation.
    pub changes: Vec<f64>,
    pub min_change: f64,
    /// Index of the deviation achieving `min_change`.
    pub witness: Option<usize>,
    pub threshold: f64,
    pub pass: bool,
}

/// Sampled deviations must not lower the cost by more than `n_se` standard errors of `J(u)`.
#[allow(clippy::too_many_arguments)]
pub fn deviation_test<M: ControlModel + ?Sized>(
    model: &M,
    u: &ControlProcess,
    state: &SolutionTriple,
    deviations: &[ControlProcess],
    n_se: f64,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &ControlOptions,
) -> Result<DeviationSummary> {
    let base = cost_along(model, u, state, grid);
    let mut changes = Vec::with_capacity(deviations.len());
    let mut secant = Secant::new(8);
    for v in deviations {
        let mut dv = v.values.clone();
        dv.axpy(-1.0, &u.values);
        let guess = secant.extrapolate(state, &dv);
        let sv = solve_state(model, v, grid, noise, opts, Some(guess.as_ref().unwrap_or(state)))?;
        secant.push(dv, &sv, state);
        changes.push(cost_along(model, v, &sv, grid).value - base.value);
    }
    let (witness, min_change) = changes
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or((None, 0.0), |(j, c)| (Some(j), c));
    let threshold = -n_se * base.se;
    Ok(DeviationSummary {
        base_cost: base.value,
        base_se: base.se,
        changes,
        min_change,
        witness,
        threshold,
        pass: min_change >= threshold,
    })
}

/// Warm starts for nearby solves: the new control increment is fitted by least squares on
/// the last few increments, and the same weights are applied to their state increments. Only
/// the starting point of the solver depends on this.
struct Secant {
    depth: usize,
    controls: Vec<PathProcess>,
    states: Vec<SolutionTriple>,
}

impl Secant {
    fn new(depth: usize) -> Self {
        Secant { depth, controls: Vec::new(), states: Vec::new() }
    }

    fn push(&mut self, dv: PathProcess, solved: &SolutionTriple, base: &SolutionTriple) {
        let mut ds = solved.clone();
        ds.x.axpy(-1.0, &base.x);
        ds.y.axpy(-1.0, &base.y);
        ds.z.axpy(-1.0, &base.z);
        self.controls.push(dv);
        self.states.push(ds);
        if self.controls.len() > self.depth {
            self.controls.remove(0);
            self.states.remove(0);
        }
    }

    fn extrapolate(&self, base: &SolutionTriple, dv: &PathProcess) -> Option<SolutionTriple> {
        let m = self.controls.len();
        if m == 0 {
            return None;
        }
        let dot = |a: &PathProcess, b: &PathProcess| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let mut gram = nalgebra::DMatrix::<f64>::zeros(m, m);
        let mut rhs = nalgebra::DVector::<f64>::zeros(m);
        for a in 0..m {
            rhs[a] = dot(&self.controls[a], dv);
            for b in a..m {
                let v = dot(&self.controls[a], &self.controls[b]);
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let trace: f64 = (0..m).map(|a| gram[(a, a)]).sum();
        for a in 0..m {
            gram[(a, a)] += 1e-10 * trace;
        }
        let w = gram.cholesky()?.solve(&rhs);
        let mut out = base.clone();
        for (c, ds) in w.iter().zip(&self.states) {
            out.x.axpy(*c, &ds.x);
            out.y.axpy(*c, &ds.y);
            out.z.axpy(*c, &ds.z);
        }
        Some(out)
    }
}
