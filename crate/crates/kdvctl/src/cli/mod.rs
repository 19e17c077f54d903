//! Experiment runner: one subcommand per workflow, a JSON config in, CSV and
//! JSON artifacts plus a checksummed manifest out.

pub mod config;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::carleman_diag::{
    audit_floor, build_nu, build_weights, carleman_audit, inner_window, random_terminal_data,
    s_floor, time_derivative_bound, AuditSetup,
};
use crate::discretization::{NegNormRealizer, NegOrder, OperatorSet};
use crate::dynamics::{ControlWindow, Eps, Stepper, SystemParams, TimeMesh, Trajectory};
use crate::error::{Error, Result};
use crate::fixed_point::{solve_nonlinear_control, FixedPointConfig};
use crate::hum::{
    compute_null_control, compute_null_control_eps, cost_sweep, ControlResult, CostCurve, HumConfig,
};
use crate::source_term::{make_time_grid, make_weights, AssemblyOptions};

use config::{load_config, CostConstant, ExperimentConfig, Model};
use output::{Csv, OutputSet};

pub const DEFAULT_OUTPUT_DIR: &str = "kdvctl-out";

#[derive(Debug, Parser)]
#[command(
    name = "kdvctl",
    version,
    about = "Null controls for the KS-KdV / elliptic system"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config
    #[arg(long)]
    pub config: PathBuf,
    /// overrides output_dir from the config
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// overrides seed from the config
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Uncontrolled forward run; writes trajectory.csv
    Simulate(Common),
    /// Null control for the configured model; writes control.csv and metrics.json
    Control(Common),
    /// Control cost over several horizons; writes cost_curve.csv and fit.json
    CostSweep {
        #[command(flatten)]
        common: Common,
        /// comma-separated horizons, overriding cost_sweep.horizons
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<f64>>,
    },
    /// Controls of the relaxed system along an eps ladder; writes eps_curve.csv
    EpsSweep {
        #[command(flatten)]
        common: Common,
        /// comma-separated eps values, overriding eps_sweep.ladder
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<f64>>,
    },
    /// Weighted-functional ratios on random adjoint trajectories; writes audit.csv
    CarlemanAudit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        mu: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c) | Command::Control(c) => c,
            Command::CostSweep { common, .. }
            | Command::EpsSweep { common, .. }
            | Command::CarlemanAudit { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Control(_) => "control",
            Command::CostSweep { .. } => "cost-sweep",
            Command::EpsSweep { .. } => "eps-sweep",
            Command::CarlemanAudit { .. } => "carleman-audit",
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidInput(_) | Error::NonCoercive { .. } | Error::Json(_) => 2,
        Error::Divergence { .. } | Error::Singular => 3,
        Error::CgFailure { .. } => 4,
        Error::NonContraction { .. } => 5,
        Error::Io(_) | Error::Interval { .. } => 1,
    }
}

/// Parses arguments, runs, and maps failures onto the exit-code contract.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let quiet = cli.command.common().quiet;
    match run(&cli.command) {
        Ok(summary) => {
            if !quiet {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("kdvctl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Context {
    cfg: ExperimentConfig,
    ops: OperatorSet,
    realizer: NegNormRealizer,
    rng: ChaCha8Rng,
    out: OutputSet,
}

impl Context {
    fn hum(&self) -> HumConfig {
        self.cfg.hum_config().expect("validated")
    }

    fn u0(&mut self) -> Result<Vec<f64>> {
        self.cfg
            .u0
            .realize(&self.ops.grid, &self.realizer, true, &mut self.rng)
    }

    fn v0(&mut self) -> Result<Option<Vec<f64>>> {
        match self.cfg.v0.clone() {
            None => Ok(None),
            Some(d) => d
                .realize(&self.ops.grid, &self.realizer, false, &mut self.rng)
                .map(Some),
        }
    }
}

/// Runs one subcommand, returning a one-line summary.
pub fn run(command: &Command) -> Result<String> {
    let started = Instant::now();
    let common = command.common();
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match command {
        Command::CostSweep {
            horizons: Some(h), ..
        } => cfg.cost_sweep.horizons = h.clone(),
        Command::EpsSweep {
            ladder: Some(l), ..
        } => cfg.eps_sweep.ladder = l.clone(),
        Command::CarlemanAudit { mu, lambda, .. } => {
            if let Some(m) = mu {
                cfg.audit.mu = m.clone();
            }
            if let Some(l) = lambda {
                cfg.audit.lambda = l.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let ops = cfg.operators()?;
    let dir = common
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let mut ctx = Context {
        realizer: NegNormRealizer::new(&ops),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        out: OutputSet::create(&dir)?,
        cfg,
        ops,
    };
    let result = match command {
        Command::Simulate(_) => cmd_simulate(&mut ctx),
        Command::Control(_) => cmd_control(&mut ctx),
        Command::CostSweep { .. } => cmd_cost_sweep(&mut ctx),
        Command::EpsSweep { .. } => cmd_eps_sweep(&mut ctx),
        Command::CarlemanAudit { .. } => cmd_carleman_audit(&mut ctx),
    };
    // the manifest is written even when a sweep reports a failure status
    let (summary, failure) = match result {
        Ok(s) => (s, None),
        Err(Failure::Hard(e)) => return Err(e),
        Err(Failure::AfterOutput(e)) => (e.to_string(), Some(e)),
    };
    write_manifest(&mut ctx, command.name(), started)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(format!(
            "{summary}; {} files in {}",
            ctx.out.files().len() + 1,
            ctx.out.dir().display()
        )),
    }
}

enum Failure {
    Hard(Error),
    /// outputs were written, the run still fails
    AfterOutput(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Hard(e)
    }
}

type CmdResult = std::result::Result<String, Failure>;

fn write_manifest(ctx: &mut Context, command: &str, started: Instant) -> Result<()> {
    let manifest = json!({
        "command": command,
        "config": ctx.cfg,
        "seed": ctx.cfg.seed,
        "rng": "ChaCha8",
        "versions": {
            "kdvctl": env!("CARGO_PKG_VERSION"),
            "manifest_format": 1,
        },
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "files": ctx.out.files(),
    });
    let text = output::to_json(&manifest)?;
    std::fs::write(ctx.out.dir().join("manifest.json"), text)?;
    Ok(())
}

fn trajectory_csv(grid_nodes: &[f64], traj: &Trajectory) -> String {
    let mut csv = Csv::new(&["t", "x", "u", "v"]);
    for (k, &t) in traj.times.iter().enumerate() {
        for (i, &x) in grid_nodes.iter().enumerate() {
            csv.row(&[t, x, traj.u[k][i], traj.v[k][i]]);
        }
    }
    csv.into_string()
}

/// Control samples on ω; step k is reported at its left time.
fn control_csv(
    grid_nodes: &[f64],
    window: &ControlWindow,
    times: &[f64],
    h: &[Vec<f64>],
) -> String {
    let mut csv = Csv::new(&["t", "x", "h"]);
    for (k, hk) in h.iter().enumerate() {
        for (i, &x) in grid_nodes.iter().enumerate() {
            if window.contains(x) {
                csv.row(&[times[k], x, hk[i]]);
            }
        }
    }
    csv.into_string()
}

fn l2_control_norm(
    ops: &OperatorSet,
    window: &ControlWindow,
    times: &[f64],
    h: &[Vec<f64>],
) -> f64 {
    let mask = window.mask(&ops.grid);
    let mut acc = 0.0;
    for (k, hk) in h.iter().enumerate() {
        let masked: Vec<f64> = hk.iter().zip(&mask).map(|(a, m)| a * m).collect();
        acc += (times[k + 1] - times[k]) * ops.grid.inner(&masked, &masked);
    }
    acc.sqrt()
}

fn cmd_simulate(ctx: &mut Context) -> CmdResult {
    let u0 = ctx.u0()?;
    let v0 = ctx.v0()?;
    let cfg = &ctx.cfg;
    let mesh = TimeMesh::uniform(cfg.horizon, cfg.grid.steps)?;
    let mut stepper = Stepper::new(&ctx.ops, cfg.params)?;
    let guard = cfg
        .model
        .is_nonlinear()
        .then_some(cfg.fixed_point.blowup_guard);
    let traj = stepper.forward(&mesh, &u0, v0.as_deref(), None, None, guard)?;
    let text = trajectory_csv(ctx.ops.grid.nodes(), &traj);
    ctx.out.write("trajectory.csv", &text)?;
    Ok(format!(
        "simulate {}: {} steps",
        cfg.model.name(),
        traj.steps()
    ))
}

#[derive(Serialize)]
struct LinearMetrics<'a> {
    model: &'a str,
    cost: f64,
    norm_order: i32,
    v_norm_order: i32,
    initial_u_norm: f64,
    terminal_u_norm: f64,
    terminal_v_norm: f64,
    relative_terminal_u: f64,
    v_tail_max: f64,
    cg_iterations: usize,
    cg_residual: f64,
    penalty: f64,
}

fn linear_metrics<'a>(model: &'a str, r: &ControlResult, penalty: f64) -> LinearMetrics<'a> {
    LinearMetrics {
        model,
        cost: r.cost,
        norm_order: -2,
        v_norm_order: -1,
        initial_u_norm: r.initial_u_norm,
        terminal_u_norm: r.terminal_u_norm,
        terminal_v_norm: r.terminal_v_norm,
        relative_terminal_u: if r.initial_u_norm > 0.0 {
            r.terminal_u_norm / r.initial_u_norm
        } else {
            0.0
        },
        v_tail_max: r.v_tail_max,
        cg_iterations: r.cg_iterations,
        cg_residual: r.cg_residual,
        penalty,
    }
}

/// K for the source-term weights, running a cost sweep when asked to fit.
fn resolve_cost_constant(ctx: &mut Context, u0: &[f64]) -> Result<(f64, Option<CostCurve>)> {
    let st = ctx.cfg.source_term;
    match st.k_cost {
        CostConstant::Value(k) => Ok((k, None)),
        CostConstant::Fit => {
            let curve = run_cost_sweep(ctx, u0)?;
            match (curve.fit_k, st.k_fallback) {
                (Some(k), _) if k > 0.0 => Ok((k, Some(curve))),
                (_, Some(k)) => Ok((k, Some(curve))),
                _ => Err(Error::Config(
                    "cost fit gave no positive K and source_term.k_fallback is unset".into(),
                )),
            }
        }
    }
}

fn run_cost_sweep(ctx: &Context, u0: &[f64]) -> Result<CostCurve> {
    let cfg = &ctx.cfg;
    let per_unit = cfg
        .cost_sweep
        .steps_per_unit_time
        .unwrap_or(cfg.grid.steps as f64 / cfg.horizon);
    let params = SystemParams {
        eps: Eps::Elliptic,
        ..cfg.params
    };
    cost_sweep(
        u0,
        &params,
        &ctx.ops,
        &cfg.cost_sweep.horizons,
        per_unit,
        &ctx.hum(),
    )
}

fn cmd_control(ctx: &mut Context) -> CmdResult {
    let u0 = ctx.u0()?;
    let v0 = ctx.v0()?;
    let hum = ctx.hum();
    let (t, m) = (ctx.cfg.horizon, ctx.cfg.grid.steps);
    let model = ctx.cfg.model;
    let nodes = ctx.ops.grid.nodes().to_vec();
    if model.is_nonlinear() {
        let (k_cost, _) = resolve_cost_constant(ctx, &u0)?;
        let st = ctx.cfg.source_term;
        let fp = ctx.cfg.fixed_point;
        let ws = make_weights(st.p(), st.q, k_cost, t).map_err(config_error)?;
        let tg = make_time_grid(t, st.q, st.k_max).map_err(config_error)?;
        let assembly = AssemblyOptions {
            base_steps: st.base_steps.unwrap_or(m),
            stop_tol: st.stop_tol,
        };
        let mut fcfg = FixedPointConfig::new(fp.radius_r, ws, tg, hum, assembly);
        fcfg.tol = fp.tol;
        fcfg.max_iter = fp.max_iter;
        fcfg.blowup_guard = fp.blowup_guard;
        let r = solve_nonlinear_control(&u0, &ctx.cfg.params, &ctx.ops, &fcfg)?;
        let times = r.assembly.mesh.times();
        let h = &r.assembly.control.values;
        let cost = l2_control_norm(&ctx.ops, &hum.window, &times, h);
        ctx.out
            .write("control.csv", &control_csv(&nodes, &hum.window, &times, h))?;
        let metrics = json!({
            "model": model.name(),
            "cost": cost,
            "norm_order": -1,
            "k_cost": k_cost,
            "fixed_point": r.summary(),
            "relative_terminal_u": if r.initial_norm > 0.0 { r.terminal_u_norm / r.initial_norm } else { 0.0 },
            "weighted": {
                "u": r.assembly.u_weighted,
                "h": r.assembly.h_weighted,
                "f": r.assembly.f_weighted,
                "residue_bound": r.assembly.residue_bound,
            },
            "intervals": r.assembly.records,
        });
        ctx.out.write_json("metrics.json", &metrics)?;
        return Ok(format!(
            "control {}: {} fixed-point iterations, terminal {:e}",
            model.name(),
            r.iterations,
            r.terminal_u_norm
        ));
    }
    let r = match v0 {
        Some(v0) => compute_null_control_eps(&u0, &v0, &ctx.cfg.params, &ctx.ops, t, m, &hum)?,
        None => compute_null_control(&u0, &ctx.cfg.params, &ctx.ops, t, m, &hum)?,
    };
    let times = r.trajectory.times.clone();
    ctx.out.write(
        "control.csv",
        &control_csv(&nodes, &hum.window, &times, &r.h),
    )?;
    ctx.out.write_json(
        "metrics.json",
        &linear_metrics(model.name(), &r, hum.penalty),
    )?;
    Ok(format!(
        "control {}: cost {:e}, {} CG iterations",
        model.name(),
        r.cost,
        r.cg_iterations
    ))
}

fn config_error(e: Error) -> Error {
    Error::Config(e.to_string())
}

pub const MIN_HORIZONS: usize = 4;

fn cmd_cost_sweep(ctx: &mut Context) -> CmdResult {
    let model = ctx.cfg.model;
    if !matches!(model, Model::LinearKsControl | Model::LinearEllipticControl) {
        return Err(Error::Config(format!(
            "cost-sweep needs a linear control model, got {}",
            model.name()
        ))
        .into());
    }
    let horizons = ctx.cfg.cost_sweep.horizons.clone();
    if horizons.len() < MIN_HORIZONS {
        return Err(Error::Config(format!(
            "cost-sweep needs at least {MIN_HORIZONS} horizons for a fit, got {}",
            horizons.len()
        ))
        .into());
    }
    let u0 = ctx.u0()?;
    let curve = run_cost_sweep(ctx, &u0).map_err(|e| match e {
        Error::InvalidInput(m) => Error::Config(m),
        e => e,
    })?;
    let mut csv = Csv::new(&["T", "inv_T", "cost", "log_cost"]);
    for (&t, &c) in curve.horizons.iter().zip(&curve.costs) {
        csv.row(&[t, 1.0 / t, c, c.ln()]);
    }
    ctx.out.write("cost_curve.csv", &csv.into_string())?;
    let fit = json!({
        "fit_K": curve.fit_k,
        "fit_offset": curve.fit_offset,
        "R2": curve.r_squared,
        "horizons": curve.horizons,
        "steps": curve.steps,
        "failures": curve.failures,
        "initial_u_norm": ctx.realizer.norm(&u0, NegOrder::MinusTwo),
    });
    ctx.out.write_json("fit.json", &fit)?;
    if 2 * curve.failures.len() > horizons.len() {
        return Err(Failure::AfterOutput(Error::CgFailure {
            iterations: ctx.cfg.hum.cg_maxit,
            residual: f64::NAN,
        }));
    }
    Ok(format!(
        "cost-sweep: fit_K {}, R2 {}",
        curve.fit_k.map_or("none".into(), |k| format!("{k:.6}")),
        curve.r_squared.map_or("none".into(), |r| format!("{r:.6}"))
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub cost: f64,
    /// cost / (‖u0‖₋₂ + ε‖v0‖₋₁)
    pub normalized_cost: f64,
    /// ‖v_ε(T) − v_limit(T)‖ in L²
    pub v_diff: f64,
    /// ‖χ(h_ε − h_limit)‖ in L²(0,T;H⁻¹), a weak-norm proxy
    pub h_diff_weak: f64,
    /// ‖h_ε − h_previous‖ in L²((0,T)×ω); NaN on the first rung
    pub h_step: f64,
}

fn cmd_eps_sweep(ctx: &mut Context) -> CmdResult {
    if ctx.cfg.model != Model::EpsParabolic {
        return Err(Error::Config(format!(
            "eps-sweep needs model eps-parabolic, got {}",
            ctx.cfg.model.name()
        ))
        .into());
    }
    let ladder = ctx.cfg.eps_sweep.ladder.clone();
    if ladder.is_empty() || ladder.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(
            Error::Config("eps_sweep.ladder must be nonempty and lie in (0,1]".into()).into(),
        );
    }
    let u0 = ctx.u0()?;
    let v0 = ctx.v0()?.expect("validated");
    let hum = ctx.hum();
    let (t, m) = (ctx.cfg.horizon, ctx.cfg.grid.steps);
    let limit_params = SystemParams {
        eps: Eps::Elliptic,
        ..ctx.cfg.params
    };
    let limit = compute_null_control(&u0, &limit_params, &ctx.ops, t, m, &hum)?;
    let times = limit.trajectory.times.clone();
    let grid = &ctx.ops.grid;
    let mask = hum.window.mask(grid);
    let u_norm = ctx.realizer.norm(&u0, NegOrder::MinusTwo);
    let v_norm = ctx.realizer.norm(&v0, NegOrder::MinusOne);
    let mut rows: Vec<EpsRow> = Vec::new();
    let mut previous: Option<Vec<Vec<f64>>> = None;
    for &eps in &ladder {
        let params = ctx.cfg.params.with_eps(eps);
        let r = compute_null_control_eps(&u0, &v0, &params, &ctx.ops, t, m, &hum)?;
        let dv: Vec<f64> = r
            .trajectory
            .final_v()
            .iter()
            .zip(limit.trajectory.final_v())
            .map(|(a, b)| a - b)
            .collect();
        let mut weak = 0.0;
        for k in 0..m {
            let d: Vec<f64> = (0..grid.n())
                .map(|i| mask[i] * (r.h[k][i] - limit.h[k][i]))
                .collect();
            weak += (times[k + 1] - times[k]) * ctx.realizer.norm(&d, NegOrder::MinusOne).powi(2);
        }
        let h_step = match &previous {
            None => f64::NAN,
            Some(p) => {
                let d: Vec<Vec<f64>> =
                    r.h.iter()
                        .zip(p)
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                        .collect();
                l2_control_norm(&ctx.ops, &hum.window, &times, &d)
            }
        };
        let denom = u_norm + eps * v_norm;
        rows.push(EpsRow {
            eps,
            cost: r.cost,
            normalized_cost: if denom > 0.0 { r.cost / denom } else { 0.0 },
            v_diff: grid.norm(&dv),
            h_diff_weak: weak.sqrt(),
            h_step,
        });
        previous = Some(r.h);
    }
    let mut csv = Csv::new(&[
        "eps",
        "cost",
        "normalized_cost",
        "v_diff",
        "h_diff_weak",
        "h_step",
    ]);
    for r in &rows {
        csv.row(&[
            r.eps,
            r.cost,
            r.normalized_cost,
            r.v_diff,
            r.h_diff_weak,
            r.h_step,
        ]);
    }
    ctx.out.write("eps_curve.csv", &csv.into_string())?;
    let normalized: Vec<f64> = rows.iter().map(|r| r.normalized_cost).collect();
    let spread = eps_spread(&normalized);
    let decreasing = rows.windows(2).all(|w| w[1].v_diff < w[0].v_diff);
    let summary = json!({
        "limit_cost": limit.cost,
        "u0_norm_minus2": u_norm,
        "v0_norm_minus1": v_norm,
        "normalized_cost_spread": spread,
        "v_diff_decreasing": decreasing,
    });
    ctx.out.write_json("eps_summary.json", &summary)?;
    Ok(format!(
        "eps-sweep: {} rungs, normalized cost spread {spread:e}",
        rows.len()
    ))
}

/// max/min of positive values; infinite when some value is zero.
pub fn eps_spread(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn cmd_carleman_audit(ctx: &mut Context) -> CmdResult {
    let a = ctx.cfg.audit.clone();
    if a.mu.is_empty() || a.lambda.is_empty() || a.mu.iter().chain(&a.lambda).any(|&v| !(v > 0.0)) {
        return Err(Error::Config(
            "audit.mu and audit.lambda must be nonempty lists of positive values".into(),
        )
        .into());
    }
    if a.samples == 0 || a.modes == 0 {
        return Err(Error::Config("audit.samples and audit.modes must be positive".into()).into());
    }
    let hum = ctx.hum();
    let data: Vec<Vec<f64>> = (0..a.samples)
        .map(|_| random_terminal_data(&ctx.ops.grid, &mut ctx.rng, a.modes))
        .collect();
    let setup = AuditSetup {
        ops: &ctx.ops,
        params: ctx.cfg.params,
        window: hum.window,
        t_final: ctx.cfg.horizon,
        steps: ctx.cfg.grid.steps,
        k: a.k,
        omega0: a.omega0,
    };
    let points: Vec<(f64, f64)> =
        a.mu.iter()
            .flat_map(|&m| a.lambda.iter().map(move |&l| (m, l)))
            .collect();
    let rows = carleman_audit(&setup, &points, &data).map_err(|e| match e {
        Error::InvalidInput(m) => Error::Config(m),
        e => e,
    })?;
    let mut csv = Csv::new(&[
        "inequality",
        "mu",
        "lambda",
        "s",
        "min_ratio",
        "median_ratio",
        "samples",
    ]);
    for r in &rows {
        csv.mixed_row(
            &[r.inequality.name()],
            &[
                r.mu,
                r.lambda,
                r.s,
                r.min_ratio,
                r.median_ratio,
                r.samples as f64,
            ],
        );
    }
    ctx.out.write("audit.csv", &csv.into_string())?;
    let nu =
        build_nu(a.omega0.unwrap_or_else(|| inner_window(&hum.window))).map_err(config_error)?;
    let w = build_weights(
        nu,
        s_floor(a.mu[0], ctx.cfg.horizon),
        a.lambda[0],
        a.k,
        ctx.cfg.horizon,
    )?;
    let bounds: Vec<_> = [1.0, 3.0, 7.0]
        .iter()
        .map(|&l| {
            let c = time_derivative_bound(&w, l, 200, 50);
            let c2 = time_derivative_bound(&w.with_s(2.0 * w.s), l, 200, 50);
            json!({"l": l, "C_s": c, "C_2s": c2})
        })
        .collect();
    let summary = json!({
        "nu": nu,
        "floor": audit_floor(&rows),
        "derivative_bounds": bounds,
        "rows": rows,
    });
    ctx.out.write_json("audit.json", &summary)?;
    Ok(format!("carleman-audit: {} grid points", rows.len()))
}
