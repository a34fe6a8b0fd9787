//! Sampling-based checks of the Lipschitz and monotonicity hypotheses on coupled models and of
//! convexity of scalar functions. A pass is sampling evidence only; a violation comes with a
//! re-evaluable witness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{At, State};
use crate::fbsde_solver::{snapshot, CoupledModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    /// Half-width of the sampling box in every coordinate.
    pub radius: f64,
    pub n_samples: usize,
    /// Size of each nested ensemble realizing the law in the primed slot.
    pub nested: usize,
    pub seed: u64,
    /// Time nodes to sample from.
    pub nodes: Vec<At>,
    /// Particle indices `0..particles` passed to per-particle model data.
    pub particles: usize,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler {
            radius: 10.0,
            n_samples: 100_000,
            nested: 32,
            seed: 0,
            nodes: vec![At { k: 0, t: 0.0 }],
            particles: 1,
        }
    }
}

impl Sampler {
    pub fn with_samples(n_samples: usize) -> Self {
        Sampler { n_samples, ..Default::default() }
    }

    fn rng(&self, sample: usize, salt: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ salt);
        rng.set_stream(sample as u64);
        rng
    }

    fn pick(&self, rng: &mut ChaCha12Rng) -> (At, usize) {
        let at = self.nodes[rng.random_range(0..self.nodes.len())];
        let i = rng.random_range(0..self.particles.max(1));
        (at, i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Witness {
    /// Two ensembles of `u = (x, y, z)` rows at node `at` for particle slot `particle`.
    Coefficients { at: At, particle: usize, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, value: f64 },
    /// A pair of pointwise arguments `Theta = (x', y', z', x, y, z)`.
    Pointwise { at: At, particle: usize, first: Vec<f64>, second: Vec<f64>, value: f64 },
    Terminal { particle: usize, first: f64, second: f64, value: f64 },
    Midpoint { first: Vec<f64>, second: Vec<f64>, gap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub lipschitz: Option<f64>,
    pub c1: Option<f64>,
    pub mu1: Option<f64>,
    pub violations: usize,
    pub witness: Option<Witness>,
    pub n_samples: usize,
    pub radius: f64,
    /// Lipschitz estimates at the sampler radius and at twice that radius.
    pub radius_trend: Option<(f64, f64)>,
    pub non_lipschitz_trend: bool,
    pub pass: bool,
}

impl MonotonicityReport {
    fn empty(s: &Sampler) -> Self {
        MonotonicityReport {
            lipschitz: None,
            c1: None,
            mu1: None,
            violations: 0,
            witness: None,
            n_samples: s.n_samples,
            radius: s.radius,
            radius_trend: None,
            non_lipschitz_trend: false,
            pass: false,
        }
    }
}

fn uniform_vec(rng: &mut ChaCha12Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..=r)).collect()
}

/// `(-f, b, sigma)` at one own state against the law given by the ensemble `(xs, ys, zs)`.
#[allow(clippy::too_many_arguments)]
fn coefficient_vector<M: CoupledModel + ?Sized>(
    model: &M,
    at: At,
    particle: usize,
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
    own: (f64, f64, &[f64]),
    out: &mut Vec<f64>,
) {
    let d = model.noise_dim();
    let law = snapshot(model, at, xs, ys, zs, d);
    let st = State { i: particle, x: own.0, y: own.1, z: own.2 };
    out.clear();
    out.push(-model.f(at, &law, &st));
    out.push(model.b(at, &law, &st));
    let mut s = vec![0.0; d];
    model.sigma(at, &law, &st, &mut s);
    out.extend(s);
}

fn pointwise_f<M: CoupledModel + ?Sized>(model: &M, at: At, particle: usize, theta: &[f64], out: &mut Vec<f64>) {
    let d = model.noise_dim();
    let (primed, own) = theta.split_at(2 + d);
    coefficient_vector(
        model,
        at,
        particle,
        &primed[..1],
        &primed[1..2],
        &primed[2..],
        (own[0], own[1], &own[2..]),
        out,
    );
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Lipschitz estimate over pointwise pairs with Dirac laws, together with `Phi`. The estimate is
/// repeated at twice the radius to expose growth.
pub fn check_h4<M: CoupledModel + ?Sized>(model: &M, sampler: &Sampler) -> MonotonicityReport {
    let d = model.noise_dim();
    let dim = 2 * (2 + d);
    let mut report = MonotonicityReport::empty(sampler);
    let estimate = |radius: f64, salt: u64, count: usize| -> (f64, Option<Witness>, usize) {
        let res: Vec<(f64, Witness, bool)> = (0..count)
            .into_par_iter()
            .map(|s| {
                let mut rng = sampler.rng(s, salt);
                let (at, i) = sampler.pick(&mut rng);
                let t1 = uniform_vec(&mut rng, dim, radius);
                let t2 = uniform_vec(&mut rng, dim, radius);
                let x1 = rng.random_range(-radius..=radius);
                let x2 = rng.random_range(-radius..=radius);
                let (mut f1, mut f2) = (Vec::new(), Vec::new());
                pointwise_f(model, at, i, &t1, &mut f1);
                pointwise_f(model, at, i, &t2, &mut f2);
                let dt = dist(&t1, &t2);
                let rf = if dt >= 1e-9 { dist(&f1, &f2) / dt } else { 0.0 };
                let dx = (x1 - x2).abs();
                let rp = if dx >= 1e-9 { (model.phi(i, x1) - model.phi(i, x2)).abs() / dx } else { 0.0 };
                let finite = rf.is_finite() && rp.is_finite();
                if rp > rf {
                    (rp, Witness::Terminal { particle: i, first: x1, second: x2, value: rp }, finite)
                } else {
                    (rf, Witness::Pointwise { at, particle: i, first: t1, second: t2, value: rf }, finite)
                }
            })
            .collect();
        let mut best: f64 = 0.0;
        let mut wit = None;
        let mut bad = 0;
        for (v, w, finite) in res {
            if !finite {
                bad += 1;
                if wit.is_none() || best.is_finite() {
                    best = f64::INFINITY;
                    wit = Some(w);
                }
                continue;
            }
            if v > best {
                best = v;
                wit = Some(w);
            }
        }
        (best, wit, bad)
    };
    let half = sampler.n_samples.div_ceil(2);
    let (c_r, w_r, bad_r) = estimate(sampler.radius, 0x4834, half);
    let (c_2r, w_2r, bad_2r) = estimate(2.0 * sampler.radius, 0x4835, sampler.n_samples - half);
    report.lipschitz = Some(c_r.max(c_2r));
    report.witness = if c_2r > c_r { w_2r } else { w_r };
    report.violations = bad_r + bad_2r;
    report.radius_trend = Some((c_r, c_2r));
    report.non_lipschitz_trend = c_2r > 1.5 * c_r;
    report.pass = report.violations == 0 && !report.non_lipschitz_trend;
    report
}

#[derive(Clone, Copy, PartialEq)]
enum Orientation {
    Decreasing,
    Increasing,
}

/// Draws one nested ensemble `u_j = (1 - rho) c + rho e_j`, so that both mean shifts and spread
/// are explored.
fn nested_ensemble(rng: &mut ChaCha12Rng, n: usize, d: usize, radius: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rho: f64 = rng.random_range(0.0..=1.0);
    let c = uniform_vec(rng, 2 + d, radius);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n * d);
    for _ in 0..n {
        let e = uniform_vec(rng, 2 + d, radius);
        let u: Vec<f64> = c.iter().zip(&e).map(|(c, e)| (1.0 - rho) * c + rho * e).collect();
        xs.push(u[0]);
        ys.push(u[1]);
        zs.extend_from_slice(&u[2..]);
    }
    (xs, ys, zs)
}

fn rows(xs: &[f64], ys: &[f64], zs: &[f64], d: usize) -> Vec<Vec<f64>> {
    (0..xs.len())
        .map(|j| {
            let mut r = vec![xs[j], ys[j]];
            r.extend_from_slice(&zs[j * d..(j + 1) * d]);
            r
        })
        .collect()
}

fn monotone<M: CoupledModel + ?Sized>(model: &M, sampler: &Sampler, orient: Orientation) -> MonotonicityReport {
    let d = model.noise_dim();
    let nn = sampler.nested.max(1);
    let sign = match orient {
        Orientation::Decreasing => -1.0,
        Orientation::Increasing => 1.0,
    };
    let res: Vec<(f64, f64, Witness, Witness)> = (0..sampler.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = sampler.rng(s, 0x4835_4836);
            let (at, i) = sampler.pick(&mut rng);
            let (x1, y1, z1) = nested_ensemble(&mut rng, nn, d, sampler.radius);
            let (x2, y2, z2) = nested_ensemble(&mut rng, nn, d, sampler.radius);
            let (mut f1, mut f2) = (Vec::new(), Vec::new());
            let mut pairing = 0.0;
            let mut norm = 0.0;
            for j in 0..nn {
                let zj1 = &z1[j * d..(j + 1) * d];
                let zj2 = &z2[j * d..(j + 1) * d];
                coefficient_vector(model, at, i, &x1, &y1, &z1, (x1[j], y1[j], zj1), &mut f1);
                coefficient_vector(model, at, i, &x2, &y2, &z2, (x2[j], y2[j], zj2), &mut f2);
                let mut du = vec![x1[j] - x2[j], y1[j] - y2[j]];
                du.extend(zj1.iter().zip(zj2).map(|(a, b)| a - b));
                pairing += f1.iter().zip(&f2).zip(&du).map(|((a, b), u)| (a - b) * u).sum::<f64>();
                norm += du.iter().map(|u| u * u).sum::<f64>();
            }
            let cf = if norm > 0.0 { sign * pairing / norm } else { f64::INFINITY };
            let a = rng.random_range(-sampler.radius..=sampler.radius);
            let b = rng.random_range(-sampler.radius..=sampler.radius);
            let dx = a - b;
            let cp = if dx.abs() >= 1e-9 {
                -sign * (model.phi(i, a) - model.phi(i, b)) * dx / (dx * dx)
            } else {
                f64::INFINITY
            };
            let wf = Witness::Coefficients {
                at,
                particle: i,
                first: rows(&x1, &y1, &z1, d),
                second: rows(&x2, &y2, &z2, d),
                value: cf,
            };
            let wp = Witness::Terminal { particle: i, first: a, second: b, value: cp };
            (cf, cp, wf, wp)
        })
        .collect();
    let mut report = MonotonicityReport::empty(sampler);
    let (mut c1, mut mu1) = (f64::INFINITY, f64::INFINITY);
    let mut worst: Option<(f64, Witness)> = None;
    for (cf, cp, wf, wp) in res {
        let cf = if cf.is_nan() { f64::NEG_INFINITY } else { cf };
        let cp = if cp.is_nan() { f64::NEG_INFINITY } else { cp };
        if cf <= 0.0 {
            report.violations += 1;
        }
        if cp <= 0.0 {
            report.violations += 1;
        }
        c1 = c1.min(cf);
        mu1 = mu1.min(cp);
        for (v, w) in [(cf, wf), (cp, wp)] {
            if worst.as_ref().is_none_or(|(best, _)| v < *best) {
                worst = Some((v, w));
            }
        }
    }
    report.c1 = Some(c1);
    report.mu1 = Some(mu1);
    if report.violations > 0 {
        report.witness = worst.map(|(_, w)| w);
    }
    report.pass = report.violations == 0 && c1 > 0.0 && mu1 > 0.0;
    report
}

/// `E<F(u1) - F(u2), u1 - u2> <= -C1 E|u1 - u2|^2` and `<Phi(x1) - Phi(x2), x1 - x2> >= mu1 |x1 - x2|^2`,
/// with `F = (-f, b, sigma)` and the expectation over nested joint ensembles.
pub fn check_h5<M: CoupledModel + ?Sized>(model: &M, sampler: &Sampler) -> MonotonicityReport {
    monotone(model, sampler, Orientation::Decreasing)
}

/// The reversed inequalities.
pub fn check_h6<M: CoupledModel + ?Sized>(model: &M, sampler: &Sampler) -> MonotonicityReport {
    monotone(model, sampler, Orientation::Increasing)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub violations: usize,
    pub witness: Option<Witness>,
    pub n_samples: usize,
    pub radius: f64,
    pub pass: bool,
}

/// Midpoint test over pairs drawn from `[center - radius, center + radius]^dim`.
pub fn check_convexity<F>(f: F, center: &[f64], sampler: &Sampler) -> ConvexityReport
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = center.len();
    let res: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..sampler.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = sampler.rng(s, 0x636f_6e76);
            let shift = |v: Vec<f64>| v.iter().zip(center).map(|(a, c)| a + c).collect::<Vec<_>>();
            let a = shift(uniform_vec(&mut rng, dim, sampler.radius));
            let b = shift(uniform_vec(&mut rng, dim, sampler.radius));
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let gap = f(&mid) - 0.5 * (f(&a) + f(&b));
            (gap, a, b)
        })
        .collect();
    let mut violations = 0;
    let mut worst: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for (gap, a, b) in res {
        let bad = gap.is_nan() || gap > 1e-9;
        if bad {
            violations += 1;
            if worst.as_ref().is_none_or(|(g, _, _)| gap > *g || gap.is_nan()) {
                worst = Some((gap, a, b));
            }
        }
    }
    ConvexityReport {
        violations,
        witness: worst.map(|(gap, first, second)| Witness::Midpoint { first, second, gap }),
        n_samples: sampler.n_samples,
        radius: sampler.radius,
        pass: violations == 0,
    }
}
