//! Command-line front end: config parsing, subcommand dispatch and result bundles.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::core::{sample_brownian, At, BrownianPaths, EnsembleConfig, EnsembleSnapshot, PathProcess, State, TimeGrid};
use crate::error::Error;
use crate::fbsde_solver::{
    residual, solve_continuation, solve_picard, AffineCoupled, AffineRow, ContinuationOptions, ContinuationSchedule,
    CoupledModel, PicardOptions, SolutionTriple,
};
use crate::forward_mv::{simulate_forward, LinearMv};
use crate::games::{game_deviation_test, nash_iterate, AffineGame, NashOptions};
use crate::hypothesis_check::{check_h4, check_h5, check_h6, MonotonicityReport, Sampler};
use crate::lq_examples::{
    lq1_model, lq2_model, lq2_model_unchecked, verify_example_with_candidate, AffineQuadratic, CandidateOptions,
    Example, Lq1Params, Lq2Params, VerifyConfig,
};
use crate::mf_bsde::{solve_mf_bsde, BackwardModel, BsdeOptions};
use crate::smp_control::{
    projected_gradient_descent, solve_state, AdjointSystem, ControlModel, ControlOptions, ControlProcess,
    ControlledSystem, DescentOptions, Trajectory,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MEANFIELD_OUT";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_NON_CONVERGENCE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "meanfield", version, about = "Particle solvers for mean-field FBSDEs, control and games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (for `plot`, the CSV file; stdout when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the ensemble seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate a McKean-Vlasov forward equation.
    SimulateForward,
    /// Solve a mean-field BSDE along a simulated forward path.
    SolveBsde,
    /// Solve a fully coupled mean-field FBSDE.
    SolveFbsde,
    /// Check the Lipschitz and monotonicity hypotheses.
    Check,
    /// Projected gradient descent on a control problem.
    Optimize,
    /// Best-response iteration for a two-player game.
    Nash,
    /// Verify the decoupled linear-quadratic example.
    Lq1,
    /// Verify the coupled linear-quadratic example.
    Lq2,
    /// Verify both linear-quadratic examples (or the one named in the config).
    Verify,
    /// Extract a table of a result bundle as CSV.
    Plot {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        what: PlotKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    MeanPath,
    CostHistory,
    Residuals,
}

impl PlotKind {
    fn table(self) -> &'static str {
        match self {
            PlotKind::MeanPath => "mean_path",
            PlotKind::CostHistory => "cost_history",
            PlotKind::Residuals => "residuals",
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Required unless the model carries its own horizon.
    pub horizon: Option<f64>,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { horizon: None, steps: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub particles: usize,
    pub brownian_dim: usize,
    pub seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { particles: 8192, brownian_dim: 1, seed: 2024 }
    }
}

/// `dY = -f dt + Z dW`, `Y_T = slope X_T + constant`, along `X` from `forward`. The driver
/// reads `x` as the forward state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearBsde {
    pub forward: LinearMv,
    pub terminal_slope: f64,
    #[serde(default)]
    pub terminal_constant: f64,
    pub driver: AffineRow,
}

impl BackwardModel for LinearBsde {
    fn terminal(&self, _i: usize, x: f64) -> f64 {
        self.terminal_slope * x + self.terminal_constant
    }
    fn driver(&self, _at: At, law: &EnsembleSnapshot, own: &State) -> f64 {
        self.driver.eval(law, own)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lq1Game {
    #[serde(default)]
    pub params: Lq1Params,
    /// Weight of the opponent's control in each player's drift.
    pub coupling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    LinearMv(LinearMv),
    LinearBsde(LinearBsde),
    AffineCoupled(AffineCoupled),
    Lq1(Lq1Params),
    Lq2(Lq2Params),
    /// The coupled example without its sign checks.
    Lq2Unchecked(Lq2Params),
    AffineQuadratic(AffineQuadratic),
    Lq1Game(Lq1Game),
    AffineGame(AffineGame),
}

impl ModelSpec {
    fn name(&self) -> &'static str {
        match self {
            ModelSpec::LinearMv(_) => "linear-mv",
            ModelSpec::LinearBsde(_) => "linear-bsde",
            ModelSpec::AffineCoupled(_) => "affine-coupled",
            ModelSpec::Lq1(_) => "lq1",
            ModelSpec::Lq2(_) => "lq2",
            ModelSpec::Lq2Unchecked(_) => "lq2-unchecked",
            ModelSpec::AffineQuadratic(_) => "affine-quadratic",
            ModelSpec::Lq1Game(_) => "lq1-game",
            ModelSpec::AffineGame(_) => "affine-game",
        }
    }

    fn own_horizon(&self) -> Option<f64> {
        match self {
            ModelSpec::Lq1(p) => Some(p.horizon),
            ModelSpec::Lq2(p) | ModelSpec::Lq2Unchecked(p) => Some(p.horizon),
            ModelSpec::Lq1Game(g) => Some(g.params.horizon),
            _ => None,
        }
    }

    /// The control problem behind this model, if it has one.
    fn control_model(&self) -> Result<Option<AffineQuadratic>, Error> {
        Ok(match self {
            ModelSpec::Lq1(p) => Some(lq1_model(p)?),
            ModelSpec::Lq2(p) => Some(lq2_model(p)?),
            ModelSpec::Lq2Unchecked(p) => Some(lq2_model_unchecked(p)?),
            ModelSpec::AffineQuadratic(m) => {
                m.validate()?;
                Some(m.clone())
            }
            _ => None,
        })
    }

    fn game(&self) -> Result<Option<AffineGame>, Error> {
        Ok(match self {
            ModelSpec::Lq1Game(g) => {
                if !g.coupling.is_finite() {
                    return Err(Error::config("coupling must be finite"));
                }
                Some(AffineGame::copies(&lq1_model(&g.params)?, g.coupling))
            }
            ModelSpec::AffineGame(g) => {
                g.validate()?;
                Some(g.clone())
            }
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FbsdeMethod {
    #[default]
    Continuation,
    Picard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbsdeSettings {
    pub method: FbsdeMethod,
    pub delta: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub continuation: ContinuationOptions,
    pub picard: PicardOptions,
}

impl Default for FbsdeSettings {
    fn default() -> Self {
        FbsdeSettings {
            method: FbsdeMethod::Continuation,
            delta: 0.1,
            inner_tol: 1e-8,
            inner_max_iter: 200,
            continuation: ContinuationOptions::default(),
            picard: PicardOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSettings {
    pub samples: usize,
    pub radius: f64,
    pub nested: usize,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings { samples: 20_000, radius: 10.0, nested: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameSettings {
    pub nash: NashOptions,
    pub deviations: usize,
    pub deviation_scales: Vec<f64>,
}

impl Default for GameSettings {
    fn default() -> Self {
        GameSettings { nash: NashOptions::default(), deviations: 50, deviation_scales: vec![0.05, 0.2, 0.5] }
    }
}

/// `particles`, `steps` and `seed` of `verify` are taken from the grid and ensemble sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub bsde: BsdeOptions,
    pub fbsde: FbsdeSettings,
    pub control: ControlOptions,
    pub descent: DescentOptions,
    pub candidate: CandidateOptions,
    pub check: CheckSettings,
    pub game: GameSettings,
    pub verify: VerifyConfig,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            bsde: BsdeOptions::default(),
            fbsde: FbsdeSettings::default(),
            control: ControlOptions::default(),
            descent: DescentOptions { tol: 1e-4, ..DescentOptions::default() },
            candidate: CandidateOptions::default(),
            check: CheckSettings::default(),
            game: GameSettings::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Particles written to the long-form path tables.
    pub sample_paths: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: None, sample_paths: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub ensemble: EnsembleSection,
    pub model: Option<ModelSpec>,
    pub solver: SolverSettings,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::config(format!("bad JSON config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| Error::config(format!("bad TOML config: {e}")))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::config(format!("config does not serialize: {e}")))
    }

    pub fn grid(&self) -> Result<TimeGrid, Error> {
        let own = self.model.as_ref().and_then(|m| m.own_horizon());
        let horizon = match (self.grid.horizon, own) {
            (Some(h), Some(o)) if h != o => {
                return Err(Error::config(format!("grid horizon {h} disagrees with model horizon {o}")))
            }
            (Some(h), _) => h,
            (None, Some(o)) => o,
            (None, None) => 1.0,
        };
        TimeGrid::new(horizon, self.grid.steps)
    }

    pub fn ensemble(&self) -> Result<EnsembleConfig, Error> {
        let e = &self.ensemble;
        EnsembleConfig::new(e.particles, e.brownian_dim, e.seed)
    }

    fn validate(&self) -> Result<(), Error> {
        self.grid()?;
        self.ensemble()?;
        if let Some(ModelSpec::AffineCoupled(m)) = &self.model {
            m.validate()?;
        }
        if let Some(m) = &self.model {
            m.control_model()?;
            m.game()?;
        }
        let f = &self.solver.fbsde;
        ContinuationSchedule::uniform(f.delta, f.inner_tol, f.inner_max_iter)?;
        let nash = &self.solver.game.nash;
        if !(nash.damping > 0.0 && nash.damping <= 1.0) {
            return Err(Error::config("nash damping must lie in (0, 1]"));
        }
        Ok(())
    }

    fn require_model(&self) -> Result<&ModelSpec, Error> {
        self.model.as_ref().ok_or_else(|| Error::config("config has no [model] section"))
    }
}

/// Hex SHA-256 of the compact JSON encoding (sorted keys) of `config`.
pub fn config_hash(config: &Value) -> String {
    let text = serde_json::to_string(config).expect("JSON values serialize");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------------------------
// Bundles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::config(format!("csv: {e}"));
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string())).map_err(io)?;
        }
        w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub metadata: Metadata,
    pub config: Value,
    pub status: String,
    pub reports: BTreeMap<String, Value>,
    pub tables: BTreeMap<String, Table>,
    /// Long-form path files written next to the bundle.
    pub files: Vec<String>,
}

struct Output {
    pass: bool,
    status: &'static str,
    reports: BTreeMap<String, Value>,
    tables: BTreeMap<String, Table>,
    paths: Vec<(String, Vec<u8>)>,
}

impl Output {
    fn new(pass: bool) -> Self {
        Output {
            pass,
            status: if pass { "pass" } else { "fail" },
            reports: BTreeMap::new(),
            tables: BTreeMap::new(),
            paths: Vec::new(),
        }
    }

    fn report(&mut self, name: &str, v: Value) {
        self.reports.insert(name.into(), v);
    }

    fn table(&mut self, name: &str, t: Table) {
        self.tables.insert(name.into(), t);
    }

    fn path(&mut self, name: &str, grid: &TimeGrid, p: &PathProcess, sample: usize) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::config(format!("csv: {e}"));
        let multi = p.dim() > 1;
        if multi {
            w.write_record(["step", "time", "particle", "component", "value"]).map_err(io)?;
        } else {
            w.write_record(["step", "time", "particle", "value"]).map_err(io)?;
        }
        for k in 0..p.nodes() {
            let t = grid.t(k).to_string();
            for i in 0..sample.min(p.particles()) {
                for (c, v) in p.at(k, i).iter().enumerate() {
                    let (k, i, c, v) = (k.to_string(), i.to_string(), c.to_string(), v.to_string());
                    if multi {
                        w.write_record([&k, &t, &i, &c, &v]).map_err(io)?;
                    } else {
                        w.write_record([&k, &t, &i, &v]).map_err(io)?;
                    }
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
        self.paths.push((format!("{name}_paths.csv"), bytes));
        Ok(())
    }
}

fn mean_table(grid: &TimeGrid, columns: &[(&str, &PathProcess)]) -> Table {
    let mut cols = vec!["step", "time"];
    cols.extend(columns.iter().map(|c| c.0));
    let mut t = Table::new(&cols);
    for k in 0..=grid.steps {
        let mut row = vec![k as f64, grid.t(k)];
        for (_, p) in columns {
            row.push(p.mean(k)[0]);
        }
        t.rows.push(row);
    }
    t
}

fn triple_tables(out: &mut Output, grid: &TimeGrid, sol: &SolutionTriple, sample: usize) -> Result<(), Error> {
    out.table("mean_path", mean_table(grid, &[("mean_x", &sol.x), ("mean_y", &sol.y), ("mean_z", &sol.z)]));
    out.path("x", grid, &sol.x, sample)?;
    out.path("y", grid, &sol.y, sample)?;
    out.path("z", grid, &sol.z, sample)
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

// ---------------------------------------------------------------------------------------------
// Subcommands

struct Ctx {
    cfg: RunConfig,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn noise(&self, grid: &TimeGrid) -> Result<BrownianPaths, Error> {
        Ok(sample_brownian(grid, &self.cfg.ensemble()?))
    }

    fn sample(&self) -> usize {
        self.cfg.output.sample_paths
    }
}

fn simulate_forward_cmd(ctx: &Ctx) -> Result<Output, Error> {
    let ModelSpec::LinearMv(model) = ctx.cfg.require_model()? else {
        return Err(Error::config("simulate-forward needs a linear-mv model"));
    };
    let grid = ctx.cfg.grid()?;
    let noise = ctx.noise(&grid)?;
    let x = simulate_forward(model, &grid, &noise)?;
    let last = x.row(grid.steps);
    let n = last.len() as f64;
    let mean = last.iter().sum::<f64>() / n;
    let sd = (last.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut out = Output::new(true);
    out.report("forward", json!({ "terminal_mean": mean, "terminal_sd": sd, "standard_error": sd / n.sqrt() }));
    out.table("mean_path", mean_table(&grid, &[("mean_x", &x)]));
    out.path("x", &grid, &x, ctx.sample())?;
    Ok(out)
}

fn solve_bsde_cmd(ctx: &Ctx) -> Result<Output, Error> {
    let ModelSpec::LinearBsde(model) = ctx.cfg.require_model()? else {
        return Err(Error::config("solve-bsde needs a linear-bsde model"));
    };
    let grid = ctx.cfg.grid()?;
    let noise = ctx.noise(&grid)?;
    let x = simulate_forward(&model.forward, &grid, &noise)?;
    let (y, z) = solve_mf_bsde(model, &grid, &noise, &x, &ctx.cfg.solver.bsde)?;
    let mut out = Output::new(true);
    out.report("bsde", json!({ "y0_mean": y.mean(0)[0], "z0_mean": z.mean(0) }));
    out.table("mean_path", mean_table(&grid, &[("mean_x", &x), ("mean_y", &y), ("mean_z", &z)]));
    out.path("x", &grid, &x, ctx.sample())?;
    out.path("y", &grid, &y, ctx.sample())?;
    out.path("z", &grid, &z, ctx.sample())?;
    Ok(out)
}

fn solve_coupled<M: CoupledModel + ?Sized>(ctx: &Ctx, model: &M, grid: &TimeGrid, noise: &BrownianPaths) -> Result<Output, Error> {
    let f = &ctx.cfg.solver.fbsde;
    let mut residuals = Table::new(&["alpha", "iteration", "change"]);
    let (sol, log) = match f.method {
        FbsdeMethod::Continuation => {
            let schedule = ContinuationSchedule::uniform(f.delta, f.inner_tol, f.inner_max_iter)?;
            let (sol, log) = solve_continuation(model, grid, noise, &schedule, &f.continuation, None)?;
            for s in &log.steps {
                for (j, c) in s.changes.iter().enumerate() {
                    residuals.rows.push(vec![s.alpha, j as f64, *c]);
                }
            }
            (sol, to_json(&log))
        }
        FbsdeMethod::Picard => {
            let (sol, log) = solve_picard(model, grid, noise, &f.picard, None)?;
            for (j, c) in log.changes.iter().enumerate() {
                residuals.rows.push(vec![1.0, j as f64, *c]);
            }
            (sol, to_json(&log))
        }
    };
    let defects = residual(model, &sol, grid, noise);
    ctx.log(format!("defects: forward {:e}, backward {:e}, terminal {:e}", defects.forward, defects.backward, defects.terminal));
    let mut out = Output::new(true);
    out.report(
        "fbsde",
        json!({
            "method": to_json(&f.method),
            "defects": { "forward": defects.forward, "backward": defects.backward, "terminal": defects.terminal },
            "y0_mean": sol.y.mean(0)[0],
            "log": log,
        }),
    );
    out.table("residuals", residuals);
    triple_tables(&mut out, grid, &sol, ctx.sample())?;
    Ok(out)
}

fn solve_fbsde_cmd(ctx: &Ctx) -> Result<Output, Error> {
    let spec = ctx.cfg.require_model()?;
    let grid = ctx.cfg.grid()?;
    let noise = ctx.noise(&grid)?;
    if let ModelSpec::AffineCoupled(m) = spec {
        return solve_coupled(ctx, m, &grid, &noise);
    }
    let Some(model) = spec.control_model()? else {
        return Err(Error::config(format!("solve-fbsde does not accept a {} model", spec.name())));
    };
    // The state system of a control problem under the zero control.
    let zero = ControlProcess::zeros(grid.steps + 1, noise.particles());
    let sys = ControlledSystem::new(&model, &zero, 0);
    solve_coupled(ctx, &sys, &grid, &noise)
}

fn monotonicity_json(r: &MonotonicityReport) -> Value {
    to_json(r)
}

fn check_cmd(ctx: &Ctx) -> Result<Output, Error> {
    let spec = ctx.cfg.require_model()?;
    let grid = ctx.cfg.grid()?;
    let c = &ctx.cfg.solver.check;
    let sampler = Sampler {
        radius: c.radius,
        n_samples: c.samples,
        nested: c.nested,
        seed: c.seed,
        nodes: vec![grid.at(0), grid.at(grid.steps / 2)],
        particles: 1,
    };
    let mut reports: Vec<(&str, MonotonicityReport)> = Vec::new();
    if let ModelSpec::AffineCoupled(m) = spec {
        reports.push(("H4", check_h4(m, &sampler)));
        reports.push(("H5", check_h5(m, &sampler)));
    } else if let Some(model) = spec.control_model()? {
        let zero = ControlProcess::zeros(grid.steps + 1, 1);
        let sys = ControlledSystem::new(&model, &zero, 0);
        reports.push(("H4", check_h4(&sys, &sampler)));
        if model.coupled() {
            reports.push(("H5", check_h5(&sys, &sampler)));
            // The adjoint system along the zero-control state.
            let noise = ctx.noise(&grid)?;
            let u = ControlProcess::zeros(grid.steps + 1, noise.particles());
            let state = solve_state(&model, &u, &grid, &noise, &ctx.cfg.solver.control, None)?;
            let tr = Trajectory::new(&model, &u, &state, &grid);
            let adj = AdjointSystem::new(&tr, 0);
            let adj_sampler = Sampler { particles: noise.particles(), ..sampler.clone() };
            reports.push(("H6", check_h6(&adj, &adj_sampler)));
        }
    } else {
        return Err(Error::config(format!("check does not accept a {} model", spec.name())));
    }
    let pass = reports.iter().all(|(_, r)| r.pass);
    let mut out = Output::new(pass);
    for (name, r) in &reports {
        if !r.pass {
            let w = r.witness.as_ref().map(|w| serde_json::to_string(w).unwrap_or_default());
            eprintln!("{name} fails: {} violations; witness {}", r.violations, w.unwrap_or_else(|| "none".into()));
        }
        ctx.log(format!("{name}: pass={} lipschitz={:?} c1={:?} mu1={:?}", r.pass, r.lipschitz, r.c1, r.mu1));
        out.report(name, monotonicity_json(r));
    }
    Ok(out)
}

fn optimize_cmd(ctx: &Ctx) -> Result<Output, Error> {
    let spec = ctx.cfg.require_model()?;
    let Some(model) = spec.control_model()? else {
        return Err(Error::config(format!("optimize does not accept a {} model", spec.name())));
    };
    let grid = ctx.cfg.grid()?;
    let noise = ctx.noise(&grid)?;
    let u0 = ControlProcess::zeros(grid.steps + 1, noise.particles());
    let s = &ctx.cfg.solver;
    let res = projected_gradient_descent(&model, &u0, &grid, &noise, &s.control, &s.descent)?;
    if !res.converged {
        return Err(Error::NonConvergence {
            what: "projected gradient descent".into(),
            history: res.history.iter().map(|h| h.gradient_norm).collect(),
        });
    }
    let mut hist = Table::new(&["iteration", "cost", "gradient_norm", "step", "backtracks"]);
    for h in &res.history {
        hist.rows.push(vec![h.iteration as f64, h.cost, h.gradient_norm, h.step, h.backtracks as f64]);
    }
    let mut out = Output::new(true);
    out.status = "converged";
    out.report(
        "optimize",
        json!({ "cost": res.cost.value, "se": res.cost.se, "iterations": res.history.len(), "converged": res.converged }),
    );
    out.table("cost_history", hist);
    out.table(
        "mean_path",
        mean_table(&grid, &[("mean_x", &res.state.x), ("mean_y", &res.state.y), ("mean_control", &res.control.values)]),
    );
    out.path("control", &grid, &res.control.values, ctx.sample())?;
    out.path("x", &grid, &res.state.x, ctx.sample())?;
    Ok(out)
}

fn nash_cmd(ctx: &Ctx) -> Result<Output, Error> {
    let spec = ctx.cfg.require_model()?;
    let Some(game) = spec.game()? else {
        return Err(Error::config(format!("nash does not accept a {} model", spec.name())));
    };
    let grid = ctx.cfg.grid()?;
    let noise = ctx.noise(&grid)?;
    let s = &ctx.cfg.solver;
    let g = &s.game;
    let z = ControlProcess::zeros(grid.steps + 1, noise.particles());
    let res = nash_iterate(&game, &[z.clone(), z], &grid, &noise, &s.control, &g.nash)?;
    ctx.log(format!("best responses converged after {} rounds", res.history.len()));
    let dev = game_deviation_test(
        &game,
        &res.controls,
        g.deviations,
        &g.deviation_scales,
        g.nash.n_se,
        g.nash.seed,
        &grid,
        &noise,
        &s.control,
    )?;
    let mut rounds = Table::new(&[
        "round",
        "shortfall",
        "residual_1",
        "residual_2",
        "cost_1",
        "cost_2",
        "change_1",
        "change_2",
    ]);
    for r in &res.history {
        rounds.rows.push(vec![
            r.round as f64,
            r.shortfall,
            r.residuals[0],
            r.residuals[1],
            r.costs[0],
            r.costs[1],
            r.changes[0],
            r.changes[1],
        ]);
    }
    let mut out = Output::new(dev.pass);
    out.report(
        "nash",
        json!({
            "rounds": res.history.len(),
            "converged": res.converged,
            "certificates": to_json(&res.certificates),
            "deviation": to_json(&dev),
        }),
    );
    out.table("residuals", rounds);
    out.table(
        "mean_path",
        mean_table(&grid, &[("mean_u1", &res.controls[0].values), ("mean_u2", &res.controls[1].values)]),
    );
    out.path("u1", &grid, &res.controls[0].values, ctx.sample())?;
    out.path("u2", &grid, &res.controls[1].values, ctx.sample())?;
    Ok(out)
}

fn verify_one(ctx: &Ctx, example: Example, tag: &str, out: &mut Output) -> Result<bool, Error> {
    let s = &ctx.cfg.solver;
    let mut cfg = s.verify.clone();
    cfg.particles = ctx.cfg.ensemble.particles;
    cfg.steps = ctx.cfg.grid.steps;
    cfg.seed = ctx.cfg.ensemble.seed;
    cfg.candidate = s.candidate;
    let horizon = match &example {
        Example::One(p) => p.horizon,
        Example::Two(p) => p.horizon,
    };
    let grid = TimeGrid::new(horizon, cfg.steps)?;
    let (report, cand) = verify_example_with_candidate(&example, &s.control, &cfg)?;
    for st in &report.stages {
        ctx.log(format!("{tag} {}: {}", st.name, if st.pass { "pass" } else { "fail" }));
    }
    if let Some(stage) = &report.failing_stage {
        eprintln!("{tag}: stage {stage} failed");
    }
    if let Some(c) = cand {
        let suffix = |n: &str| if tag.is_empty() { n.to_string() } else { format!("{n}_{tag}") };
        out.table(
            &suffix("mean_path"),
            mean_table(
                &grid,
                &[("mean_x", &c.state.x), ("mean_y", &c.state.y), ("mean_control", &c.control.values), ("mean_p", &c.adjoint.p)],
            ),
        );
        let mut hist = Table::new(&["iteration", "change"]);
        for (j, h) in c.history.iter().enumerate() {
            hist.rows.push(vec![j as f64, *h]);
        }
        out.table(&suffix("candidate_history"), hist);
        out.path(&suffix("control"), &grid, &c.control.values, ctx.sample())?;
    }
    let pass = report.pass;
    out.report(if tag.is_empty() { "verify" } else { tag }, to_json(&report));
    Ok(pass)
}

fn lq_cmd(ctx: &Ctx, which: u8) -> Result<Output, Error> {
    let example = match (which, &ctx.cfg.model) {
        (1, None) => Example::One(Lq1Params::default()),
        (1, Some(ModelSpec::Lq1(p))) => Example::One(p.clone()),
        (2, None) => Example::Two(Lq2Params::default()),
        (2, Some(ModelSpec::Lq2(p))) => {
            p.validate()?;
            Example::Two(p.clone())
        }
        (2, Some(ModelSpec::Lq2Unchecked(p))) => Example::Two(p.clone()),
        (_, Some(m)) => return Err(Error::config(format!("lq{which} does not accept a {} model", m.name()))),
        _ => unreachable!("examples are 1 and 2"),
    };
    let mut out = Output::new(true);
    let pass = verify_one(ctx, example, "", &mut out)?;
    out.pass = pass;
    out.status = if pass { "pass" } else { "fail" };
    Ok(out)
}

fn verify_cmd(ctx: &Ctx) -> Result<Output, Error> {
    match &ctx.cfg.model {
        Some(ModelSpec::Lq1(_)) => lq_cmd(ctx, 1),
        Some(ModelSpec::Lq2(_)) | Some(ModelSpec::Lq2Unchecked(_)) => lq_cmd(ctx, 2),
        Some(m) => Err(Error::config(format!("verify does not accept a {} model", m.name()))),
        None => {
            let mut out = Output::new(true);
            let one = verify_one(ctx, Example::One(Lq1Params::default()), "lq1", &mut out)?;
            let two = verify_one(ctx, Example::Two(Lq2Params::default()), "lq2", &mut out)?;
            out.pass = one && two;
            out.status = if out.pass { "pass" } else { "fail" };
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Driver

enum Failure {
    Config(String),
    Solver(Error),
    Missing(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Config(m),
            other => Failure::Solver(other),
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.ensemble.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(g: &GlobalArgs, cfg: &RunConfig, command: &str) -> PathBuf {
    if let Some(o) = &g.out {
        return o.clone();
    }
    if let Some(d) = &cfg.output.dir {
        return d.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("meanfield-out"));
    root.join(command)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SimulateForward => "simulate-forward",
        Command::SolveBsde => "solve-bsde",
        Command::SolveFbsde => "solve-fbsde",
        Command::Check => "check",
        Command::Optimize => "optimize",
        Command::Nash => "nash",
        Command::Lq1 => "lq1",
        Command::Lq2 => "lq2",
        Command::Verify => "verify",
        Command::Plot { .. } => "plot",
    }
}

fn write_bundle(dir: &Path, command: &str, cfg: &RunConfig, out: Output) -> Result<ResultBundle, Failure> {
    let config = serde_json::to_value(cfg).map_err(|e| Failure::Config(e.to_string()))?;
    let bundle = ResultBundle {
        metadata: Metadata {
            command: command.into(),
            config_hash: config_hash(&config),
            seed: cfg.ensemble.seed,
            version: env!("CARGO_PKG_VERSION").into(),
        },
        config,
        status: out.status.into(),
        reports: out.reports,
        tables: out.tables,
        files: out.paths.iter().map(|p| p.0.clone()).collect(),
    };
    let io = |e: std::io::Error| Failure::Config(format!("cannot write to {}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut text = serde_json::to_string_pretty(&bundle).map_err(|e| Failure::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(dir.join("bundle.json"), text).map_err(io)?;
    for (name, t) in &bundle.tables {
        std::fs::write(dir.join(format!("{name}.csv")), t.to_csv()?).map_err(io)?;
    }
    for (name, bytes) in &out.paths {
        std::fs::write(dir.join(name), bytes).map_err(io)?;
    }
    Ok(bundle)
}

fn plot(bundle: &Path, what: PlotKind, out: Option<&Path>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(bundle)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", bundle.display())))?;
    let b: ResultBundle = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("bad bundle: {e}")))?;
    let t = b
        .tables
        .get(what.table())
        .ok_or_else(|| Failure::Missing(format!("bundle has no {} table", what.table())))?;
    let csv = t.to_csv()?;
    match out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Failure::Config(format!("cannot write {}: {e}", p.display())))?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&csv).map_err(|e| Failure::Config(e.to_string()))?;
        }
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let g = &cli.global;
    if let Command::Plot { bundle, what } = &cli.command {
        plot(bundle, *what, g.out.as_deref())?;
        return Ok(true);
    }
    let cfg = load_config(g)?;
    let name = command_name(&cli.command);
    let dir = output_dir(g, &cfg, name);
    let ctx = Ctx { cfg, verbose: g.verbose };
    ctx.log(format!("{name}: writing to {}", dir.display()));
    let out = match cli.command {
        Command::SimulateForward => simulate_forward_cmd(&ctx),
        Command::SolveBsde => solve_bsde_cmd(&ctx),
        Command::SolveFbsde => solve_fbsde_cmd(&ctx),
        Command::Check => check_cmd(&ctx),
        Command::Optimize => optimize_cmd(&ctx),
        Command::Nash => nash_cmd(&ctx),
        Command::Lq1 => lq_cmd(&ctx, 1),
        Command::Lq2 => lq_cmd(&ctx, 2),
        Command::Verify => verify_cmd(&ctx),
        Command::Plot { .. } => unreachable!("handled above"),
    }?;
    let pass = out.pass;
    let bundle = write_bundle(&dir, name, &ctx.cfg, out)?;
    println!("{name}: {}", bundle.status);
    Ok(pass)
}

/// Parses `args` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.global.threads {
        Some(0) => Err(Failure::Config("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Failure::Config(format!("thread pool: {e}"))),
        },
        None => execute(&cli),
    };
    match result {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(Failure::Missing(m)) => {
            eprintln!("error: {m}");
            EXIT_CHECK_FAILED
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: invalid config: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Solver(e)) => {
            eprintln!("error: {e}");
            EXIT_NON_CONVERGENCE
        }
    }
}
