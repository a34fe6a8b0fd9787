//! Euler–Maruyama particle simulation of McKean–Vlasov SDEs.

use rayon::prelude::*;
use serde::Serialize;

use crate::core::{
    sample_brownian, At, BrownianPaths, EnsembleConfig, EnsembleSnapshot, PathProcess, State,
    TimeGrid,
};
use crate::error::{Error, Result};

pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Drift and diffusion already averaged over the primed slot (the model decides how).
pub trait ForwardModel: Sync {
    fn noise_dim(&self) -> usize {
        1
    }
    fn initial(&self, i: usize) -> f64;
    fn drift(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64;
    fn diffusion(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]);
}

/// Scalar-noise model from closures `b(t, law, own)` and `sigma(t, law, own)`.
pub struct FnForward<B, S> {
    pub x0: f64,
    pub drift: B,
    pub diffusion: S,
}

impl<B, S> ForwardModel for FnForward<B, S>
where
    B: Fn(f64, &EnsembleSnapshot, &State) -> f64 + Sync,
    S: Fn(f64, &EnsembleSnapshot, &State) -> f64 + Sync,
{
    fn initial(&self, _i: usize) -> f64 {
        self.x0
    }
    fn drift(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        (self.drift)(at.t, law, own)
    }
    fn diffusion(&self, at: At, law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        out[0] = (self.diffusion)(at.t, law, own);
    }
}

/// `dX = (a E[X] + c X + r) dt + (s + s_x X) dW`, scalar noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct LinearMv {
    pub a: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub r: f64,
    pub s: f64,
    #[serde(default)]
    pub s_x: f64,
    pub x0: f64,
}

impl ForwardModel for LinearMv {
    fn initial(&self, _i: usize) -> f64 {
        self.x0
    }
    fn drift(&self, _at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.a * law.mean_x + self.c * own.x + self.r
    }
    fn diffusion(&self, _at: At, _law: &EnsembleSnapshot, own: &State, out: &mut [f64]) {
        out[0] = self.s + self.s_x * own.x;
    }
}

pub fn simulate_forward<F: ForwardModel + ?Sized>(
    model: &F,
    grid: &TimeGrid,
    noise: &BrownianPaths,
) -> Result<PathProcess> {
    let n = noise.particles();
    let d = noise.dim();
    if model.noise_dim() != d {
        return Err(Error::config(format!(
            "model expects {}-dimensional noise, paths have {}",
            model.noise_dim(),
            d
        )));
    }
    noise.check(grid, n)?;
    let mut x = PathProcess::zeros(grid.steps + 1, n, 1);
    for i in 0..n {
        x.set(0, i, model.initial(i));
    }
    for k in 0..grid.steps {
        let at = grid.at(k);
        let next: Vec<f64> = {
            let row = x.row(k);
            let law = EnsembleSnapshot::forward(row);
            (0..n)
                .into_par_iter()
                .map_init(
                    || vec![0.0; d],
                    |sig, i| {
                        let own = law.state(i);
                        let b = model.drift(at, &law, &own);
                        model.diffusion(at, &law, &own, sig);
                        let dw = noise.dw(k, i);
                        let mut v = own.x + b * grid.dt;
                        for c in 0..d {
                            v += sig[c] * dw[c];
                        }
                        v
                    },
                )
                .collect()
        };
        if let Some((i, v)) =
            next.iter().enumerate().find(|(_, v)| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
        {
            return Err(Error::Divergence { step: k + 1, particle: i, value: v.abs() });
        }
        x.row_mut(k + 1).copy_from_slice(&next);
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub p: f64,
    pub horizons: Vec<f64>,
    pub moments: Vec<f64>,
    /// `None` when every excursion is zero.
    pub slope: Option<f64>,
    pub degenerate: bool,
}

/// Fits the slope of `log E[sup_{s<=delta} |X_s - X_0|^p]` against `log delta`.
///
/// Every horizon reuses the same seed, so the normals behind each run are shared and only
/// their scaling changes.
pub fn moment_scaling_check<F: ForwardModel + ?Sized>(
    model: &F,
    p: f64,
    horizons: &[f64],
    cfg: &EnsembleConfig,
    steps_per_horizon: usize,
) -> Result<ScalingReport> {
    if p < 2.0 {
        return Err(Error::config(format!("exponent must be at least 2, got {p}")));
    }
    if horizons.len() < 3 {
        return Err(Error::config("need at least 3 horizons"));
    }
    let mut moments = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let grid = TimeGrid::new(h, steps_per_horizon)?;
        let noise = sample_brownian(&grid, cfg);
        let x = simulate_forward(model, &grid, &noise)?;
        let n = cfg.particles;
        let mut acc = 0.0;
        for i in 0..n {
            let x0 = x.get(0, i);
            let sup = (1..=grid.steps).map(|k| (x.get(k, i) - x0).abs()).fold(0.0, f64::max);
            acc += sup.powf(p);
        }
        moments.push(acc / n as f64);
    }
    let degenerate = moments.iter().any(|m| *m <= 0.0);
    let slope = if degenerate {
        None
    } else {
        let lx: Vec<f64> = horizons.iter().map(|h| h.ln()).collect();
        let ly: Vec<f64> = moments.iter().map(|m| m.ln()).collect();
        Some(ls_slope(&lx, &ly))
    };
    Ok(ScalingReport { p, horizons: horizons.to_vec(), moments, slope, degenerate })
}

pub(crate) fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
