//! Weights ρ₀, ρ_F, the geometric time grid Tₖ = T − T/qᵏ and the piecewise
//! control built interval by interval with a free part (source, zero data)
//! and a controlled part (restart data, no source).
//!
//! All weights are handled through their logarithms; at desk parameters
//! they reach e^{-700} well before T.

use serde::Serialize;

use crate::discretization::{NegNormRealizer, NegOrder, OperatorSet};
use crate::dynamics::{Eps, Segment, SourceTerm, SystemParams, TimeMesh, Trajectory};
use crate::error::{Error, Result};
use crate::hum::{ControlProblem, HumConfig};

pub const DEFAULT_K_MAX: usize = 8;
pub const DEFAULT_STOP_TOL: f64 = 1e-12;
pub const MIN_INTERVAL_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightSchedule {
    pub p: f64,
    pub q: f64,
    pub k_cost: f64,
    pub t_final: f64,
    /// multiplies the ρ_F exponent; 1 except in sensitivity probes
    pub rho_f_exponent_scale: f64,
}

impl WeightSchedule {
    /// T(1 − 1/q²): the profiles are frozen below this time.
    pub fn junction(&self) -> f64 {
        self.t_final * (1.0 - 1.0 / (self.q * self.q))
    }

    /// ln ρ₀ as a function of the remaining time T − t, unextended profile.
    pub fn log_rho0_profile(&self, remaining: f64) -> f64 {
        if remaining <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -self.p * self.k_cost / ((self.q - 1.0) * remaining)
    }

    /// ln ρ_F as a function of the remaining time T − t, unextended profile.
    pub fn log_rho_f_profile(&self, remaining: f64) -> f64 {
        if remaining <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -self.rho_f_exponent_scale * (1.0 + self.p) * self.q * self.q * self.k_cost
            / ((self.q - 1.0) * remaining)
    }

    fn clamp_remaining(&self, t: f64) -> f64 {
        let cap = self.t_final / (self.q * self.q);
        (self.t_final - t).min(cap)
    }

    pub fn log_rho0(&self, t: f64) -> f64 {
        self.log_rho0_profile(self.clamp_remaining(t))
    }

    pub fn log_rho_f(&self, t: f64) -> f64 {
        self.log_rho_f_profile(self.clamp_remaining(t))
    }

    pub fn rho0(&self, t: f64) -> f64 {
        self.log_rho0(t).exp()
    }

    pub fn rho_f(&self, t: f64) -> f64 {
        self.log_rho_f(t).exp()
    }

    pub fn with_rho_f_exponent_scale(mut self, scale: f64) -> Self {
        self.rho_f_exponent_scale = scale;
        self
    }

    /// max of ln(ρ₀²/ρ_F) over `samples` uniform points of [0, T).
    pub fn max_log_ratio(&self, samples: usize) -> f64 {
        (0..samples)
            .map(|i| {
                let t = self.t_final * i as f64 / samples as f64;
                2.0 * self.log_rho0(t) - self.log_rho_f(t)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn check_shape(p: f64, q: f64) -> Result<()> {
    if !(q > 1.0 && q * q < 2.0) {
        return Err(Error::InvalidInput(format!(
            "q must satisfy 1 < q < sqrt(2), got {q}"
        )));
    }
    let floor = q * q / (2.0 - q * q);
    if !(p > floor) {
        return Err(Error::InvalidInput(format!(
            "p must exceed q^2/(2-q^2) = {floor}, got {p}"
        )));
    }
    Ok(())
}

pub fn make_weights(p: f64, q: f64, k_cost: f64, t_final: f64) -> Result<WeightSchedule> {
    check_shape(p, q)?;
    if !(k_cost > 0.0) || !k_cost.is_finite() {
        return Err(Error::InvalidInput(format!(
            "K must be positive, got {k_cost}"
        )));
    }
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidInput(format!(
            "T must be positive, got {t_final}"
        )));
    }
    let ws = WeightSchedule {
        p,
        q,
        k_cost,
        t_final,
        rho_f_exponent_scale: 1.0,
    };
    let worst = ws.max_log_ratio(10_000);
    if worst > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "ratio bound fails: max ln(rho0^2/rhoF) = {worst}"
        )));
    }
    Ok(ws)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub q: f64,
    /// T_k for k = 0..=k_max
    pub times: Vec<f64>,
    /// T − T_k = T/q^k, kept separately to avoid cancellation
    pub remaining: Vec<f64>,
}

impl TimeGrid {
    pub fn k_max(&self) -> usize {
        self.times.len() - 1
    }
}

pub fn make_time_grid(t_final: f64, q: f64, k_max: usize) -> Result<TimeGrid> {
    if !(q > 1.0 && q * q < 2.0) {
        return Err(Error::InvalidInput(format!(
            "q must satisfy 1 < q < sqrt(2), got {q}"
        )));
    }
    if k_max < 2 {
        return Err(Error::InvalidInput(format!(
            "k_max must be at least 2, got {k_max}"
        )));
    }
    if !(t_final > 0.0) {
        return Err(Error::InvalidInput("T must be positive".into()));
    }
    let remaining: Vec<f64> = (0..=k_max).map(|k| t_final / q.powi(k as i32)).collect();
    let times = remaining.iter().map(|r| t_final - r).collect();
    Ok(TimeGrid {
        t_final,
        q,
        times,
        remaining,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightRelationReport {
    /// per k: error of ln ρ₀(T_{k+2}) = ln ρ_F(T_k) + K/(T_{k+2}−T_{k+1}) relative
    /// to |ln ρ₀(T_{k+2})|, unextended profiles
    pub errors: Vec<f64>,
    pub max_rel_error: f64,
    /// relative error of the weights themselves; floored near |ln ρ|·2⁻⁵³
    /// because the weights are only representable through their logs
    pub value_errors: Vec<f64>,
    pub max_value_error: f64,
    /// the same with the constant extension below the junction
    pub extended_errors: Vec<f64>,
    /// with the extension the identity degrades to ρ_F(T_k)e^{…} ≤ ρ₀(T_{k+2})
    pub extended_inequality_holds: bool,
}

pub fn verify_weight_relation(ws: &WeightSchedule, tg: &TimeGrid) -> WeightRelationReport {
    let k = ws.k_cost;
    let mut errors = Vec::new();
    let mut value_errors = Vec::new();
    let mut extended_errors = Vec::new();
    let mut holds = true;
    for i in 0..tg.k_max() - 1 {
        // T_{k+2} − T_{k+1} without the cancellation of subtracting neighbours
        let gap = (tg.q - 1.0) * tg.remaining[i + 2];
        let lhs = ws.log_rho0_profile(tg.remaining[i + 2]);
        let rhs = ws.log_rho_f_profile(tg.remaining[i]) + k / gap;
        errors.push((lhs - rhs).abs() / lhs.abs());
        value_errors.push((lhs - rhs).exp_m1().abs());
        let lhs_ext = ws.log_rho0(tg.times[i + 2]);
        let rhs_ext = ws.log_rho_f(tg.times[i]) + k / gap;
        extended_errors.push((lhs_ext - rhs_ext).exp_m1().abs());
        if rhs_ext > lhs_ext + 1e-12 * lhs_ext.abs() {
            holds = false;
        }
    }
    let max_rel_error = errors.iter().cloned().fold(0.0, f64::max);
    let max_value_error = value_errors.iter().cloned().fold(0.0, f64::max);
    WeightRelationReport {
        errors,
        max_rel_error,
        value_errors,
        max_value_error,
        extended_errors,
        extended_inequality_holds: holds,
    }
}

/// Time mesh of the construction: one uniform segment per (T_k, T_{k+1})
/// plus a free tail segment on (T_{k_max}, T).
#[derive(Debug, Clone)]
pub struct SourceMesh {
    pub mesh: TimeMesh,
    /// node index of T_k, k = 0..=k_max, and of T at the end
    pub offsets: Vec<usize>,
}

impl SourceMesh {
    pub fn new(tg: &TimeGrid, base_steps: usize) -> Result<Self> {
        let t = tg.t_final;
        let mut segments = Vec::new();
        let mut offsets = vec![0];
        let k_max = tg.k_max();
        for k in 0..=k_max {
            let len = if k < k_max {
                tg.remaining[k] - tg.remaining[k + 1]
            } else {
                tg.remaining[k_max]
            };
            let steps = ((base_steps as f64 * len / t).round() as usize).max(MIN_INTERVAL_STEPS);
            segments.push(Segment {
                start: tg.times[k],
                dt: len / steps as f64,
                steps,
            });
            offsets.push(offsets.last().unwrap() + steps);
        }
        Ok(Self {
            mesh: TimeMesh::from_segments(segments)?,
            offsets,
        })
    }

    pub fn times(&self) -> Vec<f64> {
        self.mesh.times()
    }

    pub fn nodes(&self) -> usize {
        self.mesh.steps() + 1
    }

    /// Index of the node at T_{k_max}.
    pub fn cutoff(&self) -> usize {
        self.offsets[self.offsets.len() - 2]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalRecord {
    pub k: usize,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    /// ‖m_k‖ in the H⁻¹ surrogate
    pub restart_norm: f64,
    pub control_cost: f64,
    pub cg_iterations: usize,
    /// K e^{K/(T_{k+1}−T_k)} ‖m_k‖
    pub chaining_bound: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct PiecewiseControl {
    /// per-step values on the whole mesh, zero on the tail
    pub values: Vec<Vec<f64>>,
    /// h_k per interval (steps of that interval only)
    pub intervals: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct SourceTermResult {
    pub mesh: SourceMesh,
    pub trajectory: Trajectory,
    pub control: PiecewiseControl,
    pub records: Vec<IntervalRecord>,
    /// ‖u(T_k⁺) − u(T_k⁻)‖ at k = 1..=k_max
    pub jumps: Vec<f64>,
    /// sup over [0, T_{k_max}] of ‖u(t)‖₋₁ / ρ₀(t)
    pub u_weighted: f64,
    /// L²((0,T_{k_max})×ω) norm of h/ρ₀
    pub h_weighted: f64,
    /// L²(0,T_{k_max}; H⁻²) norm of f/ρ_F
    pub f_weighted: f64,
    pub initial_norm: f64,
    pub terminal_u_norm: f64,
    pub terminal_v_norm: f64,
    /// ρ₀(T_{k_max}) · u_weighted
    pub residue_bound: f64,
}

fn weighted(value: f64, log_weight: f64) -> f64 {
    if value == 0.0 {
        0.0
    } else {
        (value.ln() - log_weight).exp()
    }
}

/// L²-in-time (trapezoidal over [0, T_{k_max}]) norm of f/ρ_F with the
/// H⁻² surrogate in space.
pub fn weighted_source_norm(
    f: &SourceTerm,
    sm: &SourceMesh,
    ws: &WeightSchedule,
    realizer: &NegNormRealizer,
) -> f64 {
    let times = sm.times();
    let cut = sm.cutoff();
    // squared weighted samples can pass e^{709} while the norm itself is finite
    let mut logs = Vec::with_capacity(2 * cut);
    for j in 0..cut {
        let dt = times[j + 1] - times[j];
        for idx in [j, j + 1] {
            let v = realizer.norm(&f.values[idx], NegOrder::MinusTwo);
            if v > 0.0 {
                logs.push((0.5 * dt).ln() + 2.0 * (v.ln() - ws.log_rho_f(times[idx])));
            }
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return 0.0;
    }
    let sum: f64 = logs.iter().map(|l| (l - top).exp()).sum();
    (0.5 * (top + sum.ln())).exp()
}

#[derive(Debug, Clone, Copy)]
pub struct AssemblyOptions {
    pub base_steps: usize,
    pub stop_tol: f64,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            base_steps: 64,
            stop_tol: DEFAULT_STOP_TOL,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn assemble_source_term_control(
    u0: &[f64],
    f: &SourceTerm,
    params: &SystemParams,
    ops: &OperatorSet,
    ws: &WeightSchedule,
    tg: &TimeGrid,
    opts: AssemblyOptions,
    cfg: &HumConfig,
    realizer: &NegNormRealizer,
) -> Result<SourceTermResult> {
    if let Eps::Parabolic(_) = params.eps {
        return Err(Error::InvalidInput(
            "the source-term construction runs on the elliptic limit".into(),
        ));
    }
    if (ws.t_final - tg.t_final).abs() > 1e-14 * ws.t_final || (ws.q - tg.q).abs() > 0.0 {
        return Err(Error::InvalidInput(
            "weight schedule and time grid disagree on T or q".into(),
        ));
    }
    cfg.validate()?;
    let n = ops.n();
    let sm = SourceMesh::new(tg, opts.base_steps)?;
    if f.values.len() < sm.nodes() {
        return Err(Error::InvalidInput(format!(
            "source has {} samples, construction mesh has {} nodes",
            f.values.len(),
            sm.nodes()
        )));
    }
    let k_max = tg.k_max();
    let zero = vec![0.0; n];
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(sm.nodes());
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(sm.nodes());
    let mut values = Vec::with_capacity(sm.mesh.steps());
    let mut intervals = Vec::new();
    let mut records = Vec::new();
    let mut jumps = Vec::new();
    let mut restart = u0.to_vec();

    for (k, seg) in sm.mesh.segments().iter().enumerate() {
        let local = TimeMesh::from_segments(vec![Segment {
            start: 0.0,
            dt: seg.dt,
            steps: seg.steps,
        }])?;
        let off = sm.offsets[k];
        let f_local = SourceTerm {
            values: f.values[off..=off + seg.steps].to_vec(),
        };
        let mut problem = ControlProblem::new(ops, *params, cfg.window, local.clone())?;
        let free = problem
            .stepper()
            .forward(&local, &zero, None, None, Some(&f_local), None)?;
        let restart_norm = realizer.norm(&restart, NegOrder::MinusOne);
        let is_tail = k == k_max;
        let skip = is_tail || restart_norm < opts.stop_tol || restart.iter().all(|&x| x == 0.0);
        let (controlled, h_k, cost, iters) = if skip {
            let t = problem.run(&restart, None, None)?;
            (t, vec![zero.clone(); seg.steps], 0.0, 0)
        } else {
            let r = problem
                .solve(&restart, None, cfg, realizer)
                .map_err(|e| Error::Interval {
                    interval: k,
                    source: Box::new(e),
                })?;
            (r.trajectory, r.h, r.cost, r.cg_iterations)
        };
        if !is_tail {
            let len = tg.remaining[k] - tg.remaining[k + 1];
            records.push(IntervalRecord {
                k,
                t0: tg.times[k],
                t1: tg.times[k + 1],
                steps: seg.steps,
                restart_norm,
                control_cost: cost,
                cg_iterations: iters,
                chaining_bound: ws.k_cost * (ws.k_cost / len).exp() * restart_norm,
                skipped: skip,
            });
        }
        let first = if k == 0 { 0 } else { 1 };
        if k > 0 {
            let start: Vec<f64> = free.u[0]
                .iter()
                .zip(&controlled.u[0])
                .map(|(a, b)| a + b)
                .collect();
            let prev = us.last().unwrap();
            let jump = start
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            jumps.push(ops.grid.h().sqrt() * jump.sqrt());
        }
        for j in first..=seg.steps {
            us.push(
                free.u[j]
                    .iter()
                    .zip(&controlled.u[j])
                    .map(|(a, b)| a + b)
                    .collect(),
            );
            vs.push(
                free.v[j]
                    .iter()
                    .zip(&controlled.v[j])
                    .map(|(a, b)| a + b)
                    .collect(),
            );
        }
        restart = us.last().unwrap().clone();
        values.extend(h_k.iter().cloned());
        if !is_tail {
            intervals.push(h_k);
        }
    }

    let times = sm.times();
    let cut = sm.cutoff();
    let u_weighted = (0..=cut)
        .map(|j| {
            weighted(
                realizer.norm(&us[j], NegOrder::MinusOne),
                ws.log_rho0(times[j]),
            )
        })
        .fold(0.0, f64::max);
    let mut h_acc = 0.0;
    for j in 0..cut {
        let dt = times[j + 1] - times[j];
        let w = weighted(ops.grid.norm(&values[j]), ws.log_rho0(times[j]));
        h_acc += dt * w * w;
    }
    let f_weighted = weighted_source_norm(f, &sm, ws, realizer);
    let trajectory = Trajectory {
        times,
        u: us,
        v: vs,
    };
    let terminal_u_norm = realizer.norm(trajectory.final_u(), NegOrder::MinusOne);
    let terminal_v_norm = realizer.norm(trajectory.final_v(), NegOrder::MinusOne);
    let residue_bound = ws.log_rho0(tg.times[k_max]).exp() * u_weighted;
    Ok(SourceTermResult {
        mesh: sm,
        trajectory,
        control: PiecewiseControl { values, intervals },
        records,
        jumps,
        u_weighted,
        h_weighted: h_acc.sqrt(),
        f_weighted,
        initial_norm: realizer.norm(u0, NegOrder::MinusOne),
        terminal_u_norm,
        terminal_v_norm,
        residue_bound,
    })
}
