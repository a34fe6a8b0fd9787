//! Time grids, Brownian drivers, particle ensembles and empirical mean-field averages.
//!
//! The law of a process at a node is represented by the ensemble of all `N` particles
//! (each particle averages over the whole ensemble, itself included).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k * dt` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::config("grid needs at least one step"));
        }
        Ok(TimeGrid { horizon, steps, dt: horizon / steps as f64 })
    }

    /// Node time; the last node is pinned to the horizon.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }

    pub fn at(&self, k: usize) -> At {
        At { k, t: self.t(k) }
    }
}

pub fn make_time_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// Node index and time handed to every coefficient evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct At {
    pub k: usize,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RngPolicy {
    /// One ChaCha12 stream per particle (stream id = particle index), steps drawn in order.
    #[default]
    ChachaPerParticle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub particles: usize,
    pub brownian_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub rng_policy: RngPolicy,
}

impl EnsembleConfig {
    pub fn new(particles: usize, brownian_dim: usize, seed: u64) -> Result<Self> {
        let cfg = EnsembleConfig { particles, brownian_dim, seed, rng_policy: RngPolicy::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::config(format!("need at least 2 particles, got {}", self.particles)));
        }
        if self.brownian_dim == 0 {
            return Err(Error::config("Brownian dimension must be at least 1"));
        }
        Ok(())
    }
}

/// Values `values[k][i]` (each in `R^dim`) stored row-major by node.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProcess {
    nodes: usize,
    particles: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PathProcess {
    pub fn zeros(nodes: usize, particles: usize, dim: usize) -> Self {
        PathProcess { nodes, particles, dim, data: vec![0.0; nodes * particles * dim] }
    }

    pub fn constant(nodes: usize, particles: usize, value: f64) -> Self {
        PathProcess { nodes, particles, dim: 1, data: vec![value; nodes * particles] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, dim: usize) -> Result<Self> {
        let nodes = rows.len();
        if nodes == 0 {
            return Err(Error::config("empty path"));
        }
        let width = rows[0].len();
        if dim == 0 || width % dim != 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::config("ragged path rows"));
        }
        Ok(PathProcess { nodes, particles: width / dim, dim, data: rows.concat() })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }
    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value (first component).
    #[inline]
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.data[(k * self.particles + i) * self.dim]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, v: f64) {
        let idx = (k * self.particles + i) * self.dim;
        self.data[idx] = v;
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize) -> &[f64] {
        let s = (k * self.particles + i) * self.dim;
        &self.data[s..s + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let s = (k * self.particles + i) * self.dim;
        &mut self.data[s..s + self.dim]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.particles * self.dim;
        &self.data[k * w..(k + 1) * w]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.particles * self.dim;
        &mut self.data[k * w..(k + 1) * w]
    }

    /// Component-wise ensemble mean at node `k`.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        component_means(self.row(k), self.dim)
    }

    pub fn mean_path(&self) -> Vec<Vec<f64>> {
        (0..self.nodes).map(|k| self.mean(k)).collect()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Root mean square over nodes and particles (components summed).
    pub fn rms(&self) -> f64 {
        (self.sum_sq() / (self.nodes * self.particles) as f64).sqrt()
    }

    pub fn sum_sq_diff(&self, other: &PathProcess) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "path shapes differ");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn rms_diff(&self, other: &PathProcess) -> f64 {
        (self.sum_sq_diff(other) / (self.nodes * self.particles) as f64).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn axpy(&mut self, a: f64, other: &PathProcess) {
        assert_eq!(self.data.len(), other.data.len(), "path shapes differ");
        self.data.iter_mut().zip(&other.data).for_each(|(v, o)| *v += a * o);
    }

    /// Concatenates the components of paths that share nodes and particles.
    pub fn hstack(parts: &[&PathProcess]) -> Result<PathProcess> {
        let first = parts.first().ok_or_else(|| Error::config("nothing to stack"))?;
        let (nodes, particles) = (first.nodes, first.particles);
        if parts.iter().any(|p| p.nodes != nodes || p.particles != particles) {
            return Err(Error::config("stacked paths disagree on nodes or particles"));
        }
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let mut out = PathProcess::zeros(nodes, particles, dim);
        for k in 0..nodes {
            for i in 0..particles {
                let mut c = 0;
                for p in parts {
                    out.at_mut(k, i)[c..c + p.dim].copy_from_slice(p.at(k, i));
                    c += p.dim;
                }
            }
        }
        Ok(out)
    }

    /// Per node, a centered orthonormal basis (in the empirical inner product) of the span of
    /// the components, taken greedily in component order. Components whose residual falls below
    /// `rel_tol` of their own spread are dropped; at most `max_dim` are kept and unused slots
    /// are zero. Affine regressions on the result equal those on the original components.
    pub fn reduce_span(&self, max_dim: usize, rel_tol: f64) -> PathProcess {
        let (n, r) = (self.particles, self.dim);
        let keep = max_dim.min(r).max(1);
        let mut out = PathProcess::zeros(self.nodes, n, keep);
        for k in 0..self.nodes {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(keep);
            for c in 0..r {
                if basis.len() == keep {
                    break;
                }
                let col: Vec<f64> = (0..n).map(|i| self.at(k, i)[c]).collect();
                let m = mean(&col);
                let mut v: Vec<f64> = col.iter().map(|x| x - m).collect();
                let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm0 <= 1e-14 * (1.0 + m.abs()) * (n as f64).sqrt() {
                    continue;
                }
                for _ in 0..2 {
                    for e in &basis {
                        let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                        v.iter_mut().zip(e).for_each(|(a, b)| *a -= dot * b);
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > rel_tol * norm0 {
                    v.iter_mut().for_each(|a| *a /= norm);
                    basis.push(v);
                }
            }
            for (c, e) in basis.iter().enumerate() {
                let scale = (n as f64).sqrt();
                for i in 0..n {
                    out.at_mut(k, i)[c] = e[i] * scale;
                }
            }
        }
        out
    }

    /// `self = (1 - w) * self + w * other`
    pub fn blend(&mut self, w: f64, other: &PathProcess) {
        assert_eq!(self.data.len(), other.data.len(), "path shapes differ");
        self.data.iter_mut().zip(&other.data).for_each(|(v, o)| *v = (1.0 - w) * *v + w * o);
    }
}

pub(crate) fn component_means(row: &[f64], dim: usize) -> Vec<f64> {
    let n = row.len() / dim.max(1);
    let mut m = vec![0.0; dim];
    if n == 0 {
        return m;
    }
    for chunk in row.chunks_exact(dim) {
        for (a, v) in m.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= n as f64);
    m
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Brownian increments `dW[k][i] ~ N(0, dt I_d)` for `k = 0..M-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPaths {
    pub increments: PathProcess,
    pub dt: f64,
}

impl BrownianPaths {
    pub fn steps(&self) -> usize {
        self.increments.nodes()
    }
    pub fn particles(&self) -> usize {
        self.increments.particles()
    }
    pub fn dim(&self) -> usize {
        self.increments.dim()
    }

    #[inline]
    pub fn dw(&self, k: usize, i: usize) -> &[f64] {
        self.increments.at(k, i)
    }

    /// Cumulative path `W[k] = sum_{j<k} dW[j]`, with `W[0] = 0`.
    pub fn path(&self) -> PathProcess {
        let (m, n, d) = (self.steps(), self.particles(), self.dim());
        let mut w = PathProcess::zeros(m + 1, n, d);
        for k in 0..m {
            for i in 0..n {
                for c in 0..d {
                    let next = w.at(k, i)[c] + self.dw(k, i)[c];
                    w.at_mut(k + 1, i)[c] = next;
                }
            }
        }
        w
    }

    pub fn check(&self, grid: &TimeGrid, particles: usize) -> Result<()> {
        if self.steps() != grid.steps || self.particles() != particles {
            return Err(Error::config(format!(
                "noise has {} steps x {} particles, expected {} x {}",
                self.steps(),
                self.particles(),
                grid.steps,
                particles
            )));
        }
        Ok(())
    }
}

pub fn sample_brownian(grid: &TimeGrid, cfg: &EnsembleConfig) -> BrownianPaths {
    let (m, n, d) = (grid.steps, cfg.particles, cfg.brownian_dim);
    let sd = grid.dt.sqrt();
    // Per-particle columns are generated independently, then laid out by node.
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            (0..m * d).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
        })
        .collect();
    let mut inc = PathProcess::zeros(m, n, d);
    for (i, col) in columns.iter().enumerate() {
        for k in 0..m {
            inc.at_mut(k, i).copy_from_slice(&col[k * d..(k + 1) * d]);
        }
    }
    BrownianPaths { increments: inc, dt: grid.dt }
}

/// One particle's state `(x, y, z)` at a node.
#[derive(Debug, Clone, Copy)]
pub struct State<'a> {
    pub i: usize,
    pub x: f64,
    pub y: f64,
    pub z: &'a [f64],
}

/// Ensemble values at one node: the empirical law used for the primed slot.
#[derive(Debug, Clone)]
pub struct EnsembleSnapshot<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub zdim: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub mean_z: Vec<f64>,
    /// Model-specific law statistics (e.g. weighted means), filled by the model.
    pub stats: Vec<f64>,
}

impl<'a> EnsembleSnapshot<'a> {
    /// `y` and `z` may be empty for forward-only snapshots.
    pub fn new(x: &'a [f64], y: &'a [f64], z: &'a [f64], zdim: usize) -> Self {
        let n = x.len();
        debug_assert!(y.is_empty() || y.len() == n);
        debug_assert!(z.is_empty() || z.len() == n * zdim);
        EnsembleSnapshot {
            x,
            y,
            z,
            zdim,
            mean_x: mean(x),
            mean_y: mean(y),
            mean_z: if z.is_empty() { vec![0.0; zdim] } else { component_means(z, zdim) },
            stats: Vec::new(),
        }
    }

    pub fn forward(x: &'a [f64]) -> Self {
        Self::new(x, &[], &[], 0)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn state(&self, j: usize) -> State<'a> {
        State {
            i: j,
            x: self.x[j],
            y: if self.y.is_empty() { 0.0 } else { self.y[j] },
            z: if self.z.is_empty() { &[] } else { &self.z[j * self.zdim..(j + 1) * self.zdim] },
        }
    }

    pub fn all_finite(&self) -> bool {
        self.x.iter().chain(self.y).chain(self.z).all(|v| v.is_finite())
    }
}

/// `(1/N) sum_j phi(t, snapshot[j], own)`.
pub fn empirical_mean_field<F>(
    snapshot: &EnsembleSnapshot,
    own: &State,
    t: f64,
    out_dim: usize,
    phi: F,
) -> Result<Vec<f64>>
where
    F: Fn(f64, &State, &State, &mut [f64]),
{
    let n = snapshot.len();
    // Summed as offsets from the first term, so a kernel that ignores the primed slot is exact.
    let mut first = vec![0.0; out_dim];
    let mut acc = vec![0.0; out_dim];
    let mut buf = vec![0.0; out_dim];
    for j in 0..n {
        buf.iter_mut().for_each(|b| *b = 0.0);
        phi(t, &snapshot.state(j), own, &mut buf);
        if buf.iter().any(|b| !b.is_finite()) {
            return Err(Error::NumericalDomain { what: "mean-field kernel".into(), particle: j });
        }
        if j == 0 {
            first.copy_from_slice(&buf);
        }
        for ((a, b), f) in acc.iter_mut().zip(&buf).zip(&first) {
            *a += b - f;
        }
    }
    Ok(first.iter().zip(&acc).map(|(f, a)| f + a / n as f64).collect())
}
