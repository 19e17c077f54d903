//! Fixed-point iteration f ↦ −F(u[f]) for the nonlinear system, where u[f]
//! is the source-term controlled trajectory driven by f.

use serde::Serialize;

use crate::discretization::{NegNormRealizer, NegOrder, OperatorSet};
use crate::dynamics::{
    apply_f, Control, SourceTerm, Stepper, SystemParams, Trajectory, DEFAULT_BLOWUP_GUARD,
};
use crate::error::{Error, Result};
use crate::hum::HumConfig;
use crate::source_term::{
    assemble_source_term_control, weighted_source_norm, AssemblyOptions, SourceMesh,
    SourceTermResult, TimeGrid, WeightSchedule,
};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;
/// consecutive non-contracting steps tolerated before giving up
pub const NON_CONTRACTION_STREAK: usize = 3;

#[derive(Debug, Clone)]
pub struct FixedPointConfig {
    pub radius_r: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub ws: WeightSchedule,
    pub tg: TimeGrid,
    pub assembly: AssemblyOptions,
    pub hum: HumConfig,
    pub blowup_guard: f64,
}

impl FixedPointConfig {
    pub fn new(
        radius_r: f64,
        ws: WeightSchedule,
        tg: TimeGrid,
        hum: HumConfig,
        assembly: AssemblyOptions,
    ) -> Self {
        Self {
            radius_r,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            ws,
            tg,
            assembly,
            hum,
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_r > 0.0) {
            return Err(Error::InvalidInput("radius_R must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        self.hum.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    /// source whose construction produced `assembly`
    pub f_star: SourceTerm,
    pub assembly: SourceTermResult,
    /// ‖f_{n+1} − f_n‖ in the weighted source norm
    pub iterates: Vec<f64>,
    /// ratios of consecutive distances, from the second iteration on
    pub contraction_estimates: Vec<f64>,
    /// ‖f_n/ρ_F‖ for every iterate produced
    pub source_norms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub replay: Trajectory,
    pub initial_norm: f64,
    pub terminal_u_norm: f64,
    pub terminal_v_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointSummary {
    pub iterations: usize,
    pub converged: bool,
    pub iterates: Vec<f64>,
    pub contraction_estimates: Vec<f64>,
    pub source_norms: Vec<f64>,
    pub initial_norm: f64,
    pub terminal_u_norm: f64,
    pub terminal_v_norm: f64,
}

impl FixedPointResult {
    pub fn summary(&self) -> FixedPointSummary {
        FixedPointSummary {
            iterations: self.iterations,
            converged: self.converged,
            iterates: self.iterates.clone(),
            contraction_estimates: self.contraction_estimates.clone(),
            source_norms: self.source_norms.clone(),
            initial_norm: self.initial_norm,
            terminal_u_norm: self.terminal_u_norm,
            terminal_v_norm: self.terminal_v_norm,
        }
    }
}

/// −F(u) at every node of a trajectory.
pub fn source_from_trajectory(ops: &OperatorSet, traj: &Trajectory) -> SourceTerm {
    SourceTerm {
        values: traj
            .u
            .iter()
            .map(|u| apply_f(ops, u).iter().map(|x| -x).collect())
            .collect(),
    }
}

pub fn lambda_map(
    f: &SourceTerm,
    u0: &[f64],
    params: &SystemParams,
    ops: &OperatorSet,
    cfg: &FixedPointConfig,
    realizer: &NegNormRealizer,
) -> Result<(SourceTerm, SourceTermResult)> {
    let r = assemble_source_term_control(
        u0,
        f,
        params,
        ops,
        &cfg.ws,
        &cfg.tg,
        cfg.assembly,
        &cfg.hum,
        realizer,
    )?;
    Ok((source_from_trajectory(ops, &r.trajectory), r))
}

fn difference(a: &SourceTerm, b: &SourceTerm) -> SourceTerm {
    SourceTerm {
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
            .collect(),
    }
}

pub fn solve_nonlinear_control(
    u0: &[f64],
    params: &SystemParams,
    ops: &OperatorSet,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    solve_nonlinear_control_from(u0, None, params, ops, cfg)
}

/// As [`solve_nonlinear_control`], optionally starting from a given source.
pub fn solve_nonlinear_control_from(
    u0: &[f64],
    start: Option<&SourceTerm>,
    params: &SystemParams,
    ops: &OperatorSet,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    cfg.validate()?;
    let realizer = NegNormRealizer::new(ops);
    let initial_norm = realizer.norm(u0, NegOrder::MinusOne);
    let r = cfg.radius_r;
    if initial_norm > r {
        return Err(Error::NonContraction {
            ratios: Vec::new(),
            suggestion: format!(
                "initial norm {initial_norm:e} exceeds radius_R = {r:e}; scale u0 by at most {:e} \
                 and retry along the ladder {r:e}, {:e}, {:e}, {:e}",
                r / initial_norm,
                r / 2.0,
                r / 4.0,
                r / 8.0,
            ),
        });
    }
    let sm = SourceMesh::new(&cfg.tg, cfg.assembly.base_steps)?;
    let mut f = match start {
        Some(s) => {
            if s.values.len() != sm.nodes() {
                return Err(Error::InvalidInput(
                    "starting source does not match the construction mesh".into(),
                ));
            }
            s.clone()
        }
        None => SourceTerm::zeros(sm.nodes(), ops.n()),
    };
    let mut iterates = Vec::new();
    let mut ratios = Vec::new();
    let mut source_norms = vec![weighted_source_norm(&f, &sm, &cfg.ws, &realizer)];
    let mut streak = 0;
    let mut converged = false;
    let mut last = None;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let (next, assembly) = lambda_map(&f, u0, params, ops, cfg, &realizer)?;
        let d = weighted_source_norm(&difference(&next, &f), &sm, &cfg.ws, &realizer);
        if !d.is_finite() {
            return Err(Error::Divergence {
                time: cfg.tg.t_final,
                norm: d,
            });
        }
        if let Some(&prev) = iterates.last() {
            let ratio: f64 = if prev > 0.0 { d / prev } else { 0.0 };
            ratios.push(ratio);
            streak = if ratio >= 1.0 { streak + 1 } else { 0 };
        }
        iterates.push(d);
        source_norms.push(weighted_source_norm(&next, &sm, &cfg.ws, &realizer));
        if d <= cfg.tol {
            converged = true;
            last = Some(assembly);
            break;
        }
        if streak >= NON_CONTRACTION_STREAK {
            return Err(Error::NonContraction {
                ratios,
                suggestion: format!(
                    "shrink u0 along the ladder 1/2, 1/4, 1/8 of its norm {initial_norm:e}"
                ),
            });
        }
        last = Some(assembly);
        f = next;
    }
    let assembly = last.expect("at least one iteration");

    let mut stepper = Stepper::new(ops, *params)?;
    let control = Control {
        window: &cfg.hum.window,
        values: &assembly.control.values,
    };
    let replay = stepper.forward(
        &assembly.mesh.mesh,
        u0,
        None,
        Some(control),
        None,
        Some(cfg.blowup_guard),
    )?;
    Ok(FixedPointResult {
        terminal_u_norm: realizer.norm(replay.final_u(), NegOrder::MinusOne),
        terminal_v_norm: realizer.norm(replay.final_v(), NegOrder::MinusOne),
        f_star: f,
        assembly,
        iterates,
        contraction_estimates: ratios,
        source_norms,
        iterations,
        converged,
        replay,
        initial_norm,
    })
}
