//! Fully coupled mean-field FBSDEs: decoupling (Picard) iteration, the continuation
//! homotopy built on the exactly solvable linear system, and discrete residuals.
//!
//! Conventions: `dX = b dt + sigma dW`, `-dY = f dt - Z dW`, `Y_T = Phi(X_T)`.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{At, BrownianPaths, EnsembleSnapshot, PathProcess, State, TimeGrid};
use crate::error::{Error, Result};
use crate::forward_mv::DIVERGENCE_BOUND;
use crate::mf_bsde::{node_projector, solve_mf_bsde, BackwardModel, BsdeOptions, RegressionBasis};

pub trait CoupledModel: Sync {
    fn noise_dim(&self) -> usize;
    fn x0(&self, i: usize) -> f64;

    /// Extra law statistics stored in `law.stats` before coefficients are evaluated.
    fn law_stats(&self, _at: At, _law: &EnsembleSnapshot) -> Vec<f64> {
        Vec::new()
    }

    fn b(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64;
    fn sigma(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]);
    fn f(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64;
    fn phi(&self, i: usize, x: f64) -> f64;

    /// Extra per-particle paths appended to `X` as regression state, for models whose data
    /// (open-loop inputs, per-particle terminal data) is not a function of `X` alone.
    fn factors(&self) -> Option<&PathProcess> {
        None
    }
}

impl<M: CoupledModel + ?Sized> CoupledModel for &M {
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn x0(&self, i: usize) -> f64 {
        (**self).x0(i)
    }
    fn law_stats(&self, at: At, law: &EnsembleSnapshot) -> Vec<f64> {
        (**self).law_stats(at, law)
    }
    fn b(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        (**self).b(at, law, own)
    }
    fn sigma(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        (**self).sigma(at, law, own, out)
    }
    fn f(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        (**self).f(at, law, own)
    }
    fn phi(&self, i: usize, x: f64) -> f64 {
        (**self).phi(i, x)
    }
    fn factors(&self) -> Option<&PathProcess> {
        (**self).factors()
    }
}

/// Affine in `(E[X], E[Y], E[Z], X, Y, Z)` plus a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AffineRow {
    #[serde(default)]
    pub mx: f64,
    #[serde(default)]
    pub my: f64,
    #[serde(default)]
    pub mz: Vec<f64>,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(default)]
    pub z: Vec<f64>,
    #[serde(default)]
    pub c: f64,
}

impl AffineRow {
    pub fn eval(&self, law: &EnsembleSnapshot, own: &State) -> f64 {
        let mut v = self.mx * law.mean_x + self.my * law.mean_y + self.x * own.x + self.y * own.y + self.c;
        for (w, m) in self.mz.iter().zip(&law.mean_z) {
            v += w * m;
        }
        for (w, z) in self.z.iter().zip(own.z) {
            v += w * z;
        }
        v
    }

    /// Coefficients as `[mx, my, mz.., x, y, z..]` for a `d`-dimensional Z.
    pub fn as_vector(&self, d: usize) -> Vec<f64> {
        let pad = |v: &Vec<f64>| (0..d).map(|c| v.get(c).copied().unwrap_or(0.0)).collect::<Vec<_>>();
        let mut out = vec![self.mx, self.my];
        out.extend(pad(&self.mz));
        out.push(self.x);
        out.push(self.y);
        out.extend(pad(&self.z));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineCoupled {
    pub d: usize,
    pub b: AffineRow,
    pub sigma: Vec<AffineRow>,
    pub f: AffineRow,
    pub phi_slope: f64,
    #[serde(default)]
    pub phi_const: f64,
    pub x0: f64,
}

impl AffineCoupled {
    pub fn zero(d: usize) -> Self {
        AffineCoupled {
            d,
            b: AffineRow::default(),
            sigma: vec![AffineRow::default(); d],
            f: AffineRow::default(),
            phi_slope: 0.0,
            phi_const: 0.0,
            x0: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.sigma.len() != self.d {
            return Err(Error::config("sigma needs one row per Brownian component"));
        }
        let rows = std::iter::once(&self.b).chain(&self.sigma).chain(std::iter::once(&self.f));
        for r in rows {
            if r.mz.len() > self.d || r.z.len() > self.d {
                return Err(Error::config("z coefficients longer than the Brownian dimension"));
            }
        }
        Ok(())
    }
}

impl CoupledModel for AffineCoupled {
    fn noise_dim(&self) -> usize {
        self.d
    }
    fn x0(&self, _i: usize) -> f64 {
        self.x0
    }
    fn b(&self, _at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.b.eval(law, own)
    }
    fn sigma(&self, _at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(&self.sigma) {
            *o = r.eval(law, own);
        }
    }
    fn f(&self, _at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.f.eval(law, own)
    }
    fn phi(&self, _i: usize, x: f64) -> f64 {
        self.phi_slope * x + self.phi_const
    }
}

/// The coefficient blend toward the canonical monotone pair.
pub struct Blended<M> {
    pub inner: M,
    pub alpha: f64,
}

pub fn homotopy_coefficients<M: CoupledModel>(model: M, alpha: f64) -> Result<Blended<M>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("homotopy parameter must lie in [0,1], got {alpha}")));
    }
    Ok(Blended { inner: model, alpha })
}

impl<M: CoupledModel> CoupledModel for Blended<M> {
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }
    fn x0(&self, i: usize) -> f64 {
        self.inner.x0(i)
    }
    fn law_stats(&self, at: At, law: &EnsembleSnapshot) -> Vec<f64> {
        self.inner.law_stats(at, law)
    }
    fn b(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        let a = self.alpha;
        let base = if a == 0.0 { 0.0 } else { a * self.inner.b(at, law, own) };
        base + (1.0 - a) * (-law.mean_y - own.y)
    }
    fn sigma(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        let a = self.alpha;
        if a == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
        } else {
            self.inner.sigma(at, law, own, out);
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o = a * *o + (1.0 - a) * (-law.mean_z[c] - own.z[c]);
        }
    }
    fn f(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        let a = self.alpha;
        let base = if a == 0.0 { 0.0 } else { a * self.inner.f(at, law, own) };
        base + (a - 1.0) * (-law.mean_x - own.x)
    }
    fn phi(&self, i: usize, x: f64) -> f64 {
        let a = self.alpha;
        let base = if a == 0.0 { 0.0 } else { a * self.inner.phi(i, x) };
        base + (1.0 - a) * x
    }
    fn factors(&self) -> Option<&PathProcess> {
        self.inner.factors()
    }
}

/// Maps a system monotone in the reversed sense onto the usual one by negating the forward
/// component: `X' = -X` with the backward pair unchanged.
///
/// Coefficient methods of the wrapped model see the negated forward mean, but the per-particle
/// `x` slice of the law is passed through unchanged; per-particle forward information must go
/// through `law_stats`, which does receive the flipped slice.
pub struct Negated<M> {
    pub inner: M,
}

impl<M: CoupledModel> Negated<M> {
    fn flip<'a>(own: &State<'a>) -> State<'a> {
        State { i: own.i, x: -own.x, y: own.y, z: own.z }
    }

    fn view<'a>(law: &EnsembleSnapshot<'a>) -> EnsembleSnapshot<'a> {
        EnsembleSnapshot { mean_x: -law.mean_x, ..law.clone() }
    }
}

impl<M: CoupledModel> CoupledModel for Negated<M> {
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }
    fn x0(&self, i: usize) -> f64 {
        -self.inner.x0(i)
    }
    fn law_stats(&self, at: At, law: &EnsembleSnapshot) -> Vec<f64> {
        let flipped: Vec<f64> = law.x.iter().map(|v| -v).collect();
        let l = EnsembleSnapshot { x: &flipped, mean_x: -law.mean_x, ..law.clone() };
        self.inner.law_stats(at, &l)
    }
    fn b(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        -self.inner.b(at, &Self::view(law), &Self::flip(own))
    }
    fn sigma(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        self.inner.sigma(at, &Self::view(law), &Self::flip(own), out);
        out.iter_mut().for_each(|o| *o = -*o);
    }
    fn f(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.inner.f(at, &Self::view(law), &Self::flip(own))
    }
    fn phi(&self, i: usize, x: f64) -> f64 {
        self.inner.phi(i, -x)
    }
    fn factors(&self) -> Option<&PathProcess> {
        self.inner.factors()
    }
}

/// Regression state `(X, factors)`. `factors` are expected centered and orthonormal per node
/// (see `PathProcess::reduce_span`); `X` enters through its component orthogonal to them, so
/// the design stays well conditioned when `X` nearly lies in their span.
pub(crate) fn regression_state<'a>(
    x: &'a PathProcess,
    factors: Option<&PathProcess>,
) -> Cow<'a, PathProcess> {
    let Some(f) = factors else {
        return Cow::Borrowed(x);
    };
    let (n, r) = (x.particles(), f.dim());
    let mut out = PathProcess::zeros(x.nodes(), n, r + 1);
    for k in 0..x.nodes() {
        let m = crate::core::mean(x.row(k));
        let mut xc: Vec<f64> = x.row(k).iter().map(|v| v - m).collect();
        let norm0: f64 = xc.iter().map(|v| v * v).sum::<f64>();
        for c in 0..r {
            let dot: f64 = (0..n).map(|i| xc[i] * f.at(k, i)[c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| xc[i] -= dot * f.at(k, i)[c]);
        }
        let norm: f64 = xc.iter().map(|v| v * v).sum::<f64>();
        let keep = norm > 1e-18 * norm0;
        for i in 0..n {
            let row = out.at_mut(k, i);
            row[0] = if keep { xc[i] } else { 0.0 };
            row[1..].copy_from_slice(f.at(k, i));
        }
    }
    Cow::Owned(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTriple {
    pub x: PathProcess,
    pub y: PathProcess,
    pub z: PathProcess,
}

impl SolutionTriple {
    pub fn zeros(nodes: usize, particles: usize, d: usize) -> Self {
        SolutionTriple {
            x: PathProcess::zeros(nodes, particles, 1),
            y: PathProcess::zeros(nodes, particles, 1),
            z: PathProcess::zeros(nodes, particles, d),
        }
    }

    /// Zero triple except `X = x0` on every node.
    pub fn initial<M: CoupledModel + ?Sized>(model: &M, grid: &TimeGrid, particles: usize) -> Self {
        let mut s = Self::zeros(grid.steps + 1, particles, model.noise_dim());
        for k in 0..=grid.steps {
            for i in 0..particles {
                s.x.set(k, i, model.x0(i));
            }
        }
        s
    }

    /// RMS over nodes and particles, X, Y and Z weighted equally.
    pub fn rms_diff(&self, other: &SolutionTriple) -> f64 {
        let cnt = (self.x.nodes() * self.x.particles()) as f64;
        ((self.x.sum_sq_diff(&other.x) + self.y.sum_sq_diff(&other.y) + self.z.sum_sq_diff(&other.z))
            / cnt)
            .sqrt()
    }

    pub fn rms(&self) -> f64 {
        let cnt = (self.x.nodes() * self.x.particles()) as f64;
        ((self.x.sum_sq() + self.y.sum_sq() + self.z.sum_sq()) / cnt).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.x.all_finite() && self.y.all_finite() && self.z.all_finite()
    }
}

/// Per-node coefficient values `(b, sigma, f)` of a model along a triple.
pub(crate) struct NodeCoefficients {
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub f: Vec<f64>,
    pub mean_x: f64,
    pub mean_y: f64,
    pub mean_z: Vec<f64>,
}

pub(crate) fn snapshot<'a, M: CoupledModel + ?Sized>(
    model: &M,
    at: At,
    x: &'a [f64],
    y: &'a [f64],
    z: &'a [f64],
    d: usize,
) -> EnsembleSnapshot<'a> {
    let mut law = EnsembleSnapshot::new(x, y, z, d);
    law.stats = model.law_stats(at, &law);
    law
}

pub(crate) fn node_coefficients<M: CoupledModel + ?Sized>(
    model: &M,
    at: At,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    d: usize,
) -> NodeCoefficients {
    let law = snapshot(model, at, x, y, z, d);
    let n = x.len();
    let mut b = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    b.par_iter_mut()
        .zip(f.par_iter_mut())
        .zip(sigma.par_chunks_mut(d))
        .enumerate()
        .for_each(|(i, ((bi, fi), si))| {
            let own = law.state(i);
            *bi = model.b(at, &law, &own);
            *fi = model.f(at, &law, &own);
            model.sigma(at, &law, &own, si);
        });
    NodeCoefficients { b, sigma, f, mean_x: law.mean_x, mean_y: law.mean_y, mean_z: law.mean_z.clone() }
}

/// Inhomogeneous data of the exactly solvable linear system
/// `dX = (-E[Y] - Y + gamma) dt + (-E[Z] - Z + phi) dW`,
/// `-dY = (E[X] + X - varphi) dt - Z dW`, `Y_T = X_T + xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInhomogeneity {
    pub gamma: PathProcess,
    pub phi: PathProcess,
    pub varphi: PathProcess,
    pub xi: Vec<f64>,
}

impl LinearInhomogeneity {
    pub fn zeros(nodes: usize, particles: usize, d: usize) -> Self {
        LinearInhomogeneity {
            gamma: PathProcess::zeros(nodes, particles, 1),
            phi: PathProcess::zeros(nodes, particles, d),
            varphi: PathProcess::zeros(nodes, particles, 1),
            xi: vec![0.0; particles],
        }
    }

    pub fn axpy(&mut self, a: f64, other: &LinearInhomogeneity) {
        self.gamma.axpy(a, &other.gamma);
        self.phi.axpy(a, &other.phi);
        self.varphi.axpy(a, &other.varphi);
        self.xi.iter_mut().zip(&other.xi).for_each(|(v, o)| *v += a * o);
    }

    /// The part of a model not covered by the canonical pair, evaluated along `u`:
    /// `(b + E[Y] + Y, sigma + E[Z] + Z, -(f - E[X] - X), Phi(X_T) - X_T)`.
    pub fn remainder<M: CoupledModel + ?Sized>(model: &M, grid: &TimeGrid, u: &SolutionTriple) -> Self {
        let n = u.x.particles();
        let d = u.z.dim();
        let m = grid.steps;
        let mut r = Self::zeros(m + 1, n, d);
        for k in 0..=m {
            let nc = node_coefficients(model, grid.at(k), u.x.row(k), u.y.row(k), u.z.row(k), d);
            for i in 0..n {
                let (x, y) = (u.x.get(k, i), u.y.get(k, i));
                r.gamma.set(k, i, nc.b[i] + nc.mean_y + y);
                r.varphi.set(k, i, -(nc.f[i] - nc.mean_x - x));
                let z = u.z.at(k, i);
                let ph = r.phi.at_mut(k, i);
                for c in 0..d {
                    ph[c] = nc.sigma[i * d + c] + nc.mean_z[c] + z[c];
                }
            }
        }
        for i in 0..n {
            let xt = u.x.get(m, i);
            r.xi[i] = model.phi(i, xt) - xt;
        }
        r
    }
}

struct AuxBackward<'a> {
    inh: &'a LinearInhomogeneity,
}

impl BackwardModel for AuxBackward<'_> {
    fn terminal(&self, i: usize, _x: f64) -> f64 {
        self.inh.xi[i]
    }
    fn driver(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        -law.mean_y - own.y - self.inh.varphi.get(at.k, own.i) + self.inh.gamma.get(at.k, own.i)
    }
}

#[derive(Debug, Clone)]
pub struct LinearSeed {
    pub solution: SolutionTriple,
    /// The auxiliary backward component `Y - X`.
    pub aux_y: PathProcess,
}

/// Solves the linear system in three stages: the auxiliary backward equation for
/// `Y - X`, the forward equation, then the recombination `Y = aux + X`.
///
/// `conditioning` defaults to the Brownian path; iterative callers pass the previous
/// iterate's forward path.
pub fn solve_linear_seed(
    inh: &LinearInhomogeneity,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    x0: &[f64],
    conditioning: Option<&PathProcess>,
    opts: &BsdeOptions,
) -> Result<LinearSeed> {
    let n = noise.particles();
    let d = noise.dim();
    let m = grid.steps;
    noise.check(grid, n)?;
    if x0.len() != n || inh.xi.len() != n || inh.gamma.nodes() != m + 1 || inh.phi.dim() != d {
        return Err(Error::config("linear inhomogeneity does not match grid and ensemble"));
    }
    let wpath;
    let cond = match conditioning {
        Some(c) => c,
        None => {
            wpath = noise.path();
            &wpath
        }
    };
    let (aux_y, zcheck) = solve_mf_bsde(&AuxBackward { inh }, grid, noise, cond, opts)?;

    // The auxiliary martingale integrand is E[Z] + 2Z - phi; undo that map node by node.
    let mut z = PathProcess::zeros(m + 1, n, d);
    for k in 0..=m {
        let mz = zcheck.mean(k);
        let mphi = inh.phi.mean(k);
        let mean_z: Vec<f64> = (0..d).map(|c| (mz[c] + mphi[c]) / 3.0).collect();
        for i in 0..n {
            let zc = zcheck.at(k, i);
            let ph = inh.phi.at(k, i);
            let out = z.at_mut(k, i);
            for c in 0..d {
                out[c] = (zc[c] - mean_z[c] + ph[c]) / 2.0;
            }
        }
    }

    let last = z.row(m - 1).to_vec();
    z.row_mut(m).copy_from_slice(&last);

    let mut x = PathProcess::zeros(m + 1, n, 1);
    x.row_mut(0).copy_from_slice(x0);
    for k in 0..m {
        let mx = crate::core::mean(x.row(k));
        let my = crate::core::mean(aux_y.row(k));
        let mz = z.mean(k);
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x.get(k, i);
                let drift = -mx - xi - my - aux_y.get(k, i) + inh.gamma.get(k, i);
                let zk = z.at(k, i);
                let ph = inh.phi.at(k, i);
                let dw = noise.dw(k, i);
                let mut v = xi + drift * grid.dt;
                for c in 0..d {
                    v += (-mz[c] - zk[c] + ph[c]) * dw[c];
                }
                v
            })
            .collect();
        if let Some((i, v)) =
            next.iter().enumerate().find(|(_, v)| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
        {
            return Err(Error::Divergence { step: k + 1, particle: i, value: v.abs() });
        }
        x.row_mut(k + 1).copy_from_slice(&next);
    }

    let mut y = aux_y.clone();
    y.axpy(1.0, &x);
    Ok(LinearSeed { solution: SolutionTriple { x, y, z }, aux_y })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub bsde: BsdeOptions,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-8, max_iter: 200, bsde: fbsde_bsde_options() }
    }
}

/// Backward options used inside the coupled solvers: an affine basis and three driver passes,
/// so that the implicit node value is resolved to `O(dt^3)` and both solvers share one fixed
/// point. Higher degrees make the decoupling iteration unstable once `Z` enters the diffusion.
pub fn fbsde_bsde_options() -> BsdeOptions {
    BsdeOptions { basis: RegressionBasis::linear(), inner_passes: 3 }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IterationLog {
    pub changes: Vec<f64>,
}

/// Forward Euler sweep of `X` with `(Y, Z)` frozen from `prev`. Also returns the drift and
/// diffusion values used on each step.
fn forward_pass<M: CoupledModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    prev: &SolutionTriple,
) -> Result<(PathProcess, PathProcess, PathProcess)> {
    let n = noise.particles();
    let d = noise.dim();
    let m = grid.steps;
    let mut x = PathProcess::zeros(m + 1, n, 1);
    let mut drift = PathProcess::zeros(m + 1, n, 1);
    let mut diff = PathProcess::zeros(m + 1, n, d);
    for i in 0..n {
        x.set(0, i, model.x0(i));
    }
    for k in 0..m {
        let nc = node_coefficients(model, grid.at(k), x.row(k), prev.y.row(k), prev.z.row(k), d);
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dw = noise.dw(k, i);
                let mut v = x.get(k, i) + nc.b[i] * grid.dt;
                for c in 0..d {
                    v += nc.sigma[i * d + c] * dw[c];
                }
                v
            })
            .collect();
        if let Some((i, v)) =
            next.iter().enumerate().find(|(_, v)| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
        {
            return Err(Error::Divergence { step: k + 1, particle: i, value: v.abs() });
        }
        x.row_mut(k + 1).copy_from_slice(&next);
        drift.row_mut(k).copy_from_slice(&nc.b);
        diff.row_mut(k).copy_from_slice(&nc.sigma);
    }
    let last = diff.row(m - 1).to_vec();
    diff.row_mut(m).copy_from_slice(&last);
    Ok((x, drift, diff))
}

/// Backward sweep for `(Y, Z)` along a fixed forward path, using the forward increment as a
/// control variate: the regressions act on `Y - X`, and the known drift and diffusion of `X`
/// are added back exactly.
fn backward_pass<M: CoupledModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    x: &PathProcess,
    drift: &PathProcess,
    diff: &PathProcess,
    opts: &BsdeOptions,
) -> Result<(PathProcess, PathProcess)> {
    let n = noise.particles();
    let d = noise.dim();
    let m = grid.steps;
    let mut y = PathProcess::zeros(m + 1, n, 1);
    let mut z = PathProcess::zeros(m + 1, n, d);
    for i in 0..n {
        let v = model.phi(i, x.get(m, i));
        if !v.is_finite() {
            return Err(Error::NumericalDomain { what: "terminal value".into(), particle: i });
        }
        y.set(m, i, v);
    }
    let cond_state = regression_state(x, model.factors());
    let mut target = vec![0.0; n];
    for k in (0..m).rev() {
        let at = grid.at(k);
        let proj = node_projector(&opts.basis, &cond_state, k)?;
        let aux: Vec<f64> = (0..n).map(|i| y.get(k + 1, i) - x.get(k + 1, i)).collect();
        let cond = proj.project(&aux);
        for c in 0..d {
            for i in 0..n {
                target[i] = (aux[i] - cond[i]) * noise.dw(k, i)[c];
            }
            let zc = proj.project(&target);
            for i in 0..n {
                z.at_mut(k, i)[c] = zc[i] / grid.dt + diff.at(k, i)[c];
            }
        }
        let base: Vec<f64> =
            (0..n).map(|i| x.get(k, i) + cond[i] + drift.get(k, i) * grid.dt).collect();
        let mut cur = base.clone();
        for _ in 0..opts.inner_passes {
            let law = snapshot(model, at, x.row(k), &cur, z.row(k), d);
            cur = (0..n)
                .into_par_iter()
                .map(|i| base[i] + model.f(at, &law, &law.state(i)) * grid.dt)
                .collect();
        }
        if let Some(i) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain { what: "backward driver".into(), particle: i });
        }
        y.row_mut(k).copy_from_slice(&cur);
    }
    let last = z.row(m - 1).to_vec();
    z.row_mut(m).copy_from_slice(&last);
    Ok((y, z))
}

pub fn solve_picard<M: CoupledModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    opts: &PicardOptions,
    initial_guess: Option<&SolutionTriple>,
) -> Result<(SolutionTriple, IterationLog)> {
    let n = noise.particles();
    let d = noise.dim();
    noise.check(grid, n)?;
    if model.noise_dim() != d {
        return Err(Error::config("model and noise disagree on the Brownian dimension"));
    }
    let mut cur = match initial_guess {
        Some(g) => g.clone(),
        None => SolutionTriple::zeros(grid.steps + 1, n, d),
    };
    let mut log = IterationLog::default();
    for _ in 0..opts.max_iter {
        let step = (|| -> Result<SolutionTriple> {
            let (x, drift, diff) = forward_pass(model, grid, noise, &cur)?;
            let (y, z) = backward_pass(model, grid, noise, &x, &drift, &diff, &opts.bsde)?;
            Ok(SolutionTriple { x, y, z })
        })();
        let next = match step {
            Ok(s) => s,
            Err(e) if e.is_non_convergence() => {
                log.changes.push(f64::INFINITY);
                return Err(Error::NonConvergence { what: "Picard iteration".into(), history: log.changes });
            }
            Err(e) => return Err(e),
        };
        let change = next.rms_diff(&cur);
        log.changes.push(change);
        cur = next;
        if !change.is_finite() || change > 1e10 {
            break;
        }
        if change <= opts.tol {
            return Ok((cur, log));
        }
    }
    Err(Error::NonConvergence { what: "Picard iteration".into(), history: log.changes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSchedule {
    pub delta: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// `0 = alpha_0 < alpha_1 < ... < alpha_K = 1`.
    pub checkpoints: Vec<f64>,
}

impl ContinuationSchedule {
    pub fn uniform(delta: f64, inner_tol: f64, inner_max_iter: usize) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::config(format!("continuation step must lie in (0,1], got {delta}")));
        }
        let k = (1.0 / delta - 1e-9).ceil() as usize;
        let mut checkpoints: Vec<f64> = (0..k).map(|j| j as f64 * delta).collect();
        checkpoints.push(1.0);
        let s = ContinuationSchedule { delta, inner_tol, inner_max_iter, checkpoints };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.checkpoints;
        if c.len() < 2 || c[0] != 0.0 || *c.last().unwrap() != 1.0 {
            return Err(Error::config("checkpoints must run from 0 to 1"));
        }
        for w in c.windows(2) {
            if !(w[1] > w[0]) || w[1] - w[0] > self.delta + 1e-12 {
                return Err(Error::config("checkpoints must increase by at most delta"));
            }
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iter == 0 {
            return Err(Error::config("inner tolerance and iteration budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ContinuationOptions {
    pub bsde: BsdeOptions,
    /// Times a failing step is halved before giving up.
    pub max_halvings: usize,
    /// Budget for each solve of the frozen-step system.
    pub solve_max_iter: usize,
    /// History depth of Anderson mixing on the outer iteration; 0 iterates the map itself.
    #[serde(default)]
    pub anderson: usize,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions { bsde: fbsde_bsde_options(), max_halvings: 4, solve_max_iter: 400, anderson: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaLog {
    pub alpha: f64,
    pub delta: f64,
    /// RMS change of successive outer iterates.
    pub changes: Vec<f64>,
    /// Linear-seed solves spent on each outer iterate.
    pub solves: Vec<usize>,
}

impl AlphaLog {
    /// Ratios of successive changes.
    pub fn ratios(&self) -> Vec<f64> {
        self.changes.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ContinuationLog {
    pub steps: Vec<AlphaLog>,
    pub failures: Vec<(f64, f64)>,
    pub seed_solves: usize,
}

/// Solves the system blended at `alpha0` with extra data `base`, i.e. the fixed point
/// `V = S(base + alpha0 * R(V))` where `S` is the linear seed and `R` the model remainder.
#[allow(clippy::too_many_arguments)]
fn solve_frozen<M: CoupledModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    x0: &[f64],
    alpha0: f64,
    base: &LinearInhomogeneity,
    warm: &SolutionTriple,
    tol: f64,
    max_iter: usize,
    bsde: &BsdeOptions,
) -> Result<(SolutionTriple, usize)> {
    let mut v = warm.clone();
    let mut last = f64::INFINITY;
    for it in 1..=max_iter {
        let mut inh = base.clone();
        if alpha0 != 0.0 {
            inh.axpy(alpha0, &LinearInhomogeneity::remainder(model, grid, &v));
        }
        let cond = regression_state(&v.x, model.factors());
        let next = solve_linear_seed(&inh, grid, noise, x0, Some(&cond), bsde)?.solution;
        let change = next.rms_diff(&v);
        v = next;
        if !change.is_finite() || change > 1e8 {
            return Err(Error::NonConvergence { what: "frozen-step solve".into(), history: vec![change] });
        }
        if change <= tol || (it > 5 && change >= last && change <= 10.0 * tol) {
            return Ok((v, it));
        }
        last = change;
    }
    Err(Error::NonConvergence { what: "frozen-step solve".into(), history: vec![last] })
}

/// Runs the outer fixed-point iteration that moves the solution from `alpha0` to
/// `alpha0 + delta`.
#[allow(clippy::too_many_arguments)]
fn continuation_step<M: CoupledModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    x0: &[f64],
    alpha0: f64,
    delta: f64,
    start: &SolutionTriple,
    schedule: &ContinuationSchedule,
    opts: &ContinuationOptions,
) -> std::result::Result<(SolutionTriple, AlphaLog), AlphaLog> {
    let mut log = AlphaLog { alpha: alpha0 + delta, delta, changes: Vec::new(), solves: Vec::new() };
    let mut u = start.clone();
    let mut prev_change = f64::INFINITY;
    let mut accel = Anderson::new(opts.anderson);
    for _ in 0..schedule.inner_max_iter {
        let mut base = LinearInhomogeneity::remainder(model, grid, &u);
        base.scale(delta);
        let solve_tol = (0.01 * prev_change).clamp(0.1 * schedule.inner_tol, 1e-3);
        let res = solve_frozen(
            model,
            grid,
            noise,
            x0,
            alpha0,
            &base,
            &u,
            solve_tol,
            opts.solve_max_iter,
            &opts.bsde,
        );
        let (next, used) = match res {
            Ok(v) => v,
            Err(_) => return Err(log),
        };
        let change = next.rms_diff(&u);
        log.changes.push(change);
        log.solves.push(used);
        if !change.is_finite() || (log.changes.len() > 3 && change > 10.0 * log.changes[0]) {
            return Err(log);
        }
        if change <= schedule.inner_tol {
            return Ok((next, log));
        }
        if change > 2.0 * prev_change {
            accel.reset();
        }
        u = accel.step(&u, next);
        prev_change = change;
    }
    Err(log)
}

/// Anderson mixing for a fixed point `u = G(u)`: the next iterate combines the last few
/// images with weights minimizing the combined residual `G(u) - u`.
struct Anderson {
    depth: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    df: Vec<Vec<f64>>,
    dg: Vec<Vec<f64>>,
}

fn flatten(u: &SolutionTriple) -> Vec<f64> {
    [u.x.data(), u.y.data(), u.z.data()].concat()
}

fn unflatten(like: SolutionTriple, v: &[f64]) -> SolutionTriple {
    let mut out = like;
    let (a, b) = (out.x.data().len(), out.y.data().len());
    out.x.data_mut().copy_from_slice(&v[..a]);
    out.y.data_mut().copy_from_slice(&v[a..a + b]);
    out.z.data_mut().copy_from_slice(&v[a + b..]);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson { depth, prev: None, df: Vec::new(), dg: Vec::new() }
    }

    fn reset(&mut self) {
        self.prev = None;
        self.df.clear();
        self.dg.clear();
    }

    fn step(&mut self, u: &SolutionTriple, image: SolutionTriple) -> SolutionTriple {
        if self.depth == 0 {
            return image;
        }
        let g = flatten(&image);
        let f: Vec<f64> = g.iter().zip(flatten(u)).map(|(a, b)| a - b).collect();
        if let Some((pf, pg)) = self.prev.take() {
            self.df.push(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
            self.dg.push(g.iter().zip(&pg).map(|(a, b)| a - b).collect());
            if self.df.len() > self.depth {
                self.df.remove(0);
                self.dg.remove(0);
            }
        }
        let m = self.df.len();
        let mut next = g.clone();
        if m > 0 {
            let mut gram = nalgebra::DMatrix::<f64>::zeros(m, m);
            let mut rhs = nalgebra::DVector::<f64>::zeros(m);
            for a in 0..m {
                rhs[a] = dot(&self.df[a], &f);
                for b in a..m {
                    let v = dot(&self.df[a], &self.df[b]);
                    gram[(a, b)] = v;
                    gram[(b, a)] = v;
                }
            }
            let trace: f64 = (0..m).map(|a| gram[(a, a)]).sum();
            for a in 0..m {
                gram[(a, a)] += 1e-10 * trace;
            }
            if let Some(gamma) = gram.cholesky().map(|c| c.solve(&rhs)) {
                for (c, dgc) in gamma.iter().zip(&self.dg) {
                    next.iter_mut().zip(dgc).for_each(|(v, d)| *v -= c * d);
                }
            }
        }
        self.prev = Some((f, g));
        unflatten(image, &next)
    }
}

impl LinearInhomogeneity {
    pub fn scale(&mut self, c: f64) {
        self.gamma.scale(c);
        self.phi.scale(c);
        self.varphi.scale(c);
        self.xi.iter_mut().for_each(|v| *v *= c);
    }
}

/// Homotopy from the canonical linear system (`alpha = 0`) to `model` (`alpha = 1`).
///
/// Each step from `alpha0` to `alpha0 + delta` iterates `U <- S_{alpha0}(delta R(U))`, where
/// `S_{alpha0}` solves the `alpha0`-blended system with extra data and is itself realized by
/// iterating the linear seed. All solves share `noise`. A failing step is halved, at most
/// `opts.max_halvings` times in total.
pub fn solve_continuation<M: CoupledModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    schedule: &ContinuationSchedule,
    opts: &ContinuationOptions,
    initial_guess: Option<&SolutionTriple>,
) -> Result<(SolutionTriple, ContinuationLog)> {
    schedule.validate()?;
    let n = noise.particles();
    let d = noise.dim();
    noise.check(grid, n)?;
    if model.noise_dim() != d {
        return Err(Error::config("model and noise disagree on the Brownian dimension"));
    }
    let x0: Vec<f64> = (0..n).map(|i| model.x0(i)).collect();
    let mut log = ContinuationLog::default();

    // A supplied guess is the first outer iterate directly. Otherwise start from the linear
    // system with zero data, made self-consistent in its conditioning.
    let mut u = match initial_guess {
        Some(g) => g.clone(),
        None => {
            let zero = LinearInhomogeneity::zeros(grid.steps + 1, n, d);
            let start = SolutionTriple::initial(model, grid, n);
            let tol = 0.1 * schedule.inner_tol;
            let (u, used) = solve_frozen(
                model,
                grid,
                noise,
                &x0,
                0.0,
                &zero,
                &start,
                tol,
                opts.solve_max_iter,
                &opts.bsde,
            )
            .map_err(|e| match e {
                Error::NonConvergence { history, .. } => {
                    Error::Continuation { alpha: 0.0, delta: 0.0, history }
                }
                other => other,
            })?;
            log.seed_solves = used;
            u
        }
    };

    let mut alpha = 0.0;
    let mut targets: Vec<f64> = schedule.checkpoints[1..].to_vec();
    targets.reverse();
    let mut halvings_left = opts.max_halvings;
    while let Some(&target) = targets.last() {
        let delta = target - alpha;
        match continuation_step(model, grid, noise, &x0, alpha, delta, &u, schedule, opts) {
            Ok((next, step_log)) => {
                u = next;
                alpha = target;
                targets.pop();
                log.steps.push(step_log);
            }
            Err(step_log) => {
                log.failures.push((alpha, delta));
                if halvings_left == 0 {
                    return Err(Error::Continuation { alpha, delta, history: step_log.changes });
                }
                halvings_left -= 1;
                targets.push(alpha + 0.5 * delta);
            }
        }
    }
    Ok((u, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Defects {
    pub forward: f64,
    pub backward: f64,
    pub terminal: f64,
}

impl Defects {
    pub fn max(&self) -> f64 {
        self.forward.max(self.backward).max(self.terminal)
    }
}

/// RMS defects of the discrete equations along `sol`.
pub fn residual<M: CoupledModel + ?Sized>(
    model: &M,
    sol: &SolutionTriple,
    grid: &TimeGrid,
    noise: &BrownianPaths,
) -> Defects {
    let n = sol.x.particles();
    let d = sol.z.dim();
    let m = grid.steps;
    let (mut fw, mut bw) = (0.0, 0.0);
    for k in 0..m {
        let nc = node_coefficients(model, grid.at(k), sol.x.row(k), sol.y.row(k), sol.z.row(k), d);
        for i in 0..n {
            let dw = noise.dw(k, i);
            let z = sol.z.at(k, i);
            let mut sdw = 0.0;
            let mut zdw = 0.0;
            for c in 0..d {
                sdw += nc.sigma[i * d + c] * dw[c];
                zdw += z[c] * dw[c];
            }
            let ef = sol.x.get(k + 1, i) - sol.x.get(k, i) - nc.b[i] * grid.dt - sdw;
            let eb = sol.y.get(k + 1, i) - sol.y.get(k, i) + nc.f[i] * grid.dt - zdw;
            fw += ef * ef;
            bw += eb * eb;
        }
    }
    let mut term = 0.0;
    for i in 0..n {
        let e = sol.y.get(m, i) - model.phi(i, sol.x.get(m, i));
        term += e * e;
    }
    let cnt = (m * n) as f64;
    Defects { forward: (fw / cnt).sqrt(), backward: (bw / cnt).sqrt(), terminal: (term / n as f64).sqrt() }
}
