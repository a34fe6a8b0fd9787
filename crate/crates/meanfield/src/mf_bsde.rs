//! Backward solver for mean-field BSDEs with regression-estimated conditional expectations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{At, BrownianPaths, EnsembleSnapshot, PathProcess, State, TimeGrid};
use crate::error::{Error, Result};

/// Driver `f(t, law, own)` with `own.x` the first component of the conditioning state.
pub trait BackwardModel: Sync {
    fn terminal(&self, i: usize, x: f64) -> f64;

    /// Extra law statistics stored in `law.stats` before the driver is evaluated.
    fn law_stats(&self, _at: At, _law: &EnsembleSnapshot) -> Vec<f64> {
        Vec::new()
    }

    fn driver(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64;
}

/// Closure-backed model; the terminal closure receives `(i, x_T)`.
pub struct FnBackward<G, F> {
    pub terminal: G,
    pub driver: F,
}

impl<G, F> BackwardModel for FnBackward<G, F>
where
    G: Fn(usize, f64) -> f64 + Sync,
    F: Fn(f64, &EnsembleSnapshot, &State) -> f64 + Sync,
{
    fn terminal(&self, i: usize, x: f64) -> f64 {
        (self.terminal)(i, x)
    }
    fn driver(&self, at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        (self.driver)(at.t, law, own)
    }
}

/// Monomials of total degree `<= degree` in the (optionally standardized) conditioning state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionBasis {
    pub degree: usize,
    /// Ridge weight per particle: the penalty is `ridge * N`.
    pub ridge: f64,
    pub standardize: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3, ridge: 1e-8, standardize: true }
    }
}

impl RegressionBasis {
    pub fn linear() -> Self {
        RegressionBasis { degree: 1, ..Default::default() }
    }

    fn exponents(&self, dim: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0; dim]];
        let mut frontier = vec![vec![0; dim]];
        for _ in 0..self.degree {
            let mut next = Vec::new();
            for e in &frontier {
                let start = e.iter().rposition(|&v| v > 0).unwrap_or(0);
                for c in start..dim {
                    let mut f = e.clone();
                    f[c] += 1;
                    next.push(f);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    pub fn size(&self, dim: usize) -> usize {
        self.exponents(dim).len()
    }

    /// Row-major `N x B` feature matrix; column 0 is the constant.
    pub fn features(&self, row: &[f64], dim: usize) -> Vec<f64> {
        let n = row.len() / dim;
        let exps = self.exponents(dim);
        let b = exps.len();
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        if self.standardize {
            for c in 0..dim {
                let m = (0..n).map(|i| row[i * dim + c]).sum::<f64>() / n as f64;
                let v = (0..n).map(|i| (row[i * dim + c] - m).powi(2)).sum::<f64>() / n as f64;
                shift[c] = m;
                scale[c] = if v.sqrt() > 1e-14 * (1.0 + m.abs()) { 1.0 / v.sqrt() } else { 0.0 };
            }
        }
        let mut feats = vec![0.0; n * b];
        let mut pw = vec![0.0; dim * (self.degree + 1)];
        for i in 0..n {
            for c in 0..dim {
                let u = (row[i * dim + c] - shift[c]) * scale[c];
                let mut acc = 1.0;
                for p in 0..=self.degree {
                    pw[c * (self.degree + 1) + p] = acc;
                    acc *= u;
                }
            }
            for (j, e) in exps.iter().enumerate() {
                let mut v = 1.0;
                for c in 0..dim {
                    v *= pw[c * (self.degree + 1) + e[c]];
                }
                feats[i * b + j] = v;
            }
        }
        feats
    }
}

/// Cached ridge least-squares fit on a fixed design, reusable across target vectors.
pub struct Projector {
    n: usize,
    b: usize,
    feats: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub lambda: f64,
}

impl Projector {
    /// `penalize_intercept = false` leaves column 0 unpenalized, so fitted values keep the
    /// sample mean of the targets exactly.
    pub fn fit(feats: Vec<f64>, b: usize, lambda: f64, penalize_intercept: bool) -> Result<Self> {
        let n = feats.len() / b;
        if n < b {
            return Err(Error::config(format!("regression needs N >= B, got N={n}, B={b}")));
        }
        let mut gram = DMatrix::<f64>::zeros(b, b);
        for row in feats.chunks_exact(b) {
            for r in 0..b {
                let fr = row[r];
                if fr == 0.0 {
                    continue;
                }
                for c in r..b {
                    gram[(r, c)] += fr * row[c];
                }
            }
        }
        for r in 0..b {
            for c in 0..r {
                gram[(r, c)] = gram[(c, r)];
            }
        }
        let trace: f64 = (0..b).map(|r| gram[(r, r)]).sum();
        let mut lam = lambda;
        for attempt in 0..8 {
            let mut g = gram.clone();
            for r in 0..b {
                if r > 0 || penalize_intercept {
                    g[(r, r)] += lam;
                }
            }
            if let Some(chol) = g.clone().cholesky() {
                let ok = (0..b).all(|r| chol.l_dirty()[(r, r)] > 1e-150);
                if ok {
                    return Ok(Projector { n, b, feats, chol, lambda: lam });
                }
            }
            let floor = 1e-12 * trace.max(1e-300);
            lam = if attempt == 0 { lam.max(floor) * 100.0 } else { lam * 100.0 };
        }
        let eig = gram.symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        Err(Error::SingularRegression { condition: if lo > 0.0 { hi / lo } else { f64::INFINITY } })
    }

    pub fn coefficients(&self, targets: &[f64]) -> Vec<f64> {
        debug_assert_eq!(targets.len(), self.n);
        let mut rhs = DVector::<f64>::zeros(self.b);
        for (row, t) in self.feats.chunks_exact(self.b).zip(targets) {
            for r in 0..self.b {
                rhs[r] += row[r] * t;
            }
        }
        self.chol.solve(&rhs).iter().copied().collect()
    }

    pub fn project(&self, targets: &[f64]) -> Vec<f64> {
        let c = self.coefficients(targets);
        self.feats
            .chunks_exact(self.b)
            .map(|row| row.iter().zip(&c).map(|(f, w)| f * w).sum())
            .collect()
    }
}

/// Minimizes `sum_i (target_i - sum_b c_b F_ib)^2 + lambda |c|^2` (all coefficients penalized).
pub fn regress_conditional_expectation(
    features: &[f64],
    b: usize,
    targets: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    if b == 0 || features.len() % b != 0 {
        return Err(Error::config("feature matrix shape does not match basis size"));
    }
    if features.len() / b != targets.len() {
        return Err(Error::config("targets and features disagree on N"));
    }
    let p = Projector::fit(features.to_vec(), b, lambda, true)?;
    Ok(p.coefficients(targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BsdeOptions {
    pub basis: RegressionBasis,
    /// Driver re-evaluations per step (1 = predictor plus one corrector).
    pub inner_passes: usize,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        BsdeOptions { basis: RegressionBasis::default(), inner_passes: 1 }
    }
}

/// Builds the regression for the conditioning state at node `k`.
pub(crate) fn node_projector(
    basis: &RegressionBasis,
    conditioning: &PathProcess,
    k: usize,
) -> Result<Projector> {
    let dim = conditioning.dim();
    let feats = basis.features(conditioning.row(k), dim);
    let b = basis.size(dim);
    let lambda = basis.ridge * conditioning.particles() as f64;
    Projector::fit(feats, b, lambda, false)
}

/// Returns `(Y, Z)` on all nodes, with `Z[M] := Z[M-1]`.
pub fn solve_mf_bsde<B: BackwardModel + ?Sized>(
    model: &B,
    grid: &TimeGrid,
    noise: &BrownianPaths,
    conditioning: &PathProcess,
    opts: &BsdeOptions,
) -> Result<(PathProcess, PathProcess)> {
    let n = noise.particles();
    let d = noise.dim();
    let m = grid.steps;
    noise.check(grid, n)?;
    if conditioning.nodes() != m + 1 || conditioning.particles() != n {
        return Err(Error::config("conditioning path does not match grid and ensemble"));
    }
    if opts.inner_passes == 0 {
        return Err(Error::config("inner_passes must be at least 1"));
    }
    let cond_x = |k: usize, i: usize| conditioning.at(k, i)[0];

    let mut y = PathProcess::zeros(m + 1, n, 1);
    let mut z = PathProcess::zeros(m + 1, n, d);
    for i in 0..n {
        let v = model.terminal(i, cond_x(m, i));
        if !v.is_finite() {
            return Err(Error::NumericalDomain { what: "terminal value".into(), particle: i });
        }
        y.set(m, i, v);
    }
    let xs: Vec<Vec<f64>> = (0..=m).map(|k| (0..n).map(|i| cond_x(k, i)).collect()).collect();

    let mut target = vec![0.0; n];
    for k in (0..m).rev() {
        let at = grid.at(k);
        let proj = node_projector(&opts.basis, conditioning, k)?;
        let next = y.row(k + 1).to_vec();
        let cond_mean = proj.project(&next);
        // Centering by the fitted mean leaves the conditional expectation unchanged but
        // removes the O(|Y| / sqrt(dt N)) noise of the raw product.
        for c in 0..d {
            for i in 0..n {
                target[i] = (next[i] - cond_mean[i]) * noise.dw(k, i)[c];
            }
            let zc = proj.project(&target);
            for i in 0..n {
                z.at_mut(k, i)[c] = zc[i] / grid.dt;
            }
        }
        let zrow = z.row(k).to_vec();
        let mut cur = cond_mean.clone();
        for _ in 0..opts.inner_passes {
            let mut law = EnsembleSnapshot::new(&xs[k], &cur, &zrow, d);
            law.stats = model.law_stats(at, &law);
            let upd: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| cond_mean[i] + model.driver(at, &law, &law.state(i)) * grid.dt)
                .collect();
            cur = upd;
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
