//! Penalized HUM controls by conjugate gradient on the adjoint Gramian, and
//! the measured cost-versus-horizon law.
//!
//! For terminal adjoint data φ the Gramian Λφ is the terminal state reached
//! from rest under the control `h = χ_ω · obs(adjoint(φ))`. The penalized
//! dual problem `(Λ + penalty)φ* = −z_free(T)` yields the control whose
//! terminal state is `−penalty · φ*`.

use serde::{Deserialize, Serialize};

use crate::discretization::{NegNormRealizer, NegOrder, OperatorSet};
use crate::dynamics::{
    axpy_in, Channel, Control, ControlWindow, Eps, Stepper, SystemParams, TimeMesh, Trajectory,
};
use crate::error::{Error, Result};

pub const DEFAULT_PENALTY: f64 = 1e-10;
pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAXIT: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumConfig {
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_maxit")]
    pub cg_maxit: usize,
    pub window: ControlWindow,
}

fn default_penalty() -> f64 {
    DEFAULT_PENALTY
}
fn default_cg_tol() -> f64 {
    DEFAULT_CG_TOL
}
fn default_cg_maxit() -> usize {
    DEFAULT_CG_MAXIT
}

impl HumConfig {
    pub fn new(window: ControlWindow) -> Self {
        Self {
            penalty: DEFAULT_PENALTY,
            cg_tol: DEFAULT_CG_TOL,
            cg_maxit: DEFAULT_CG_MAXIT,
            window,
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty > 0.0) || !self.penalty.is_finite() {
            return Err(Error::InvalidInput(format!(
                "penalty must be positive, got {}",
                self.penalty
            )));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::InvalidInput(format!(
                "cg_tol must lie in (0,1), got {}",
                self.cg_tol
            )));
        }
        if self.cg_maxit == 0 {
            return Err(Error::InvalidInput("cg_maxit must be at least 1".into()));
        }
        self.window.validate()
    }
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    /// control per step on the full grid, zero outside ω
    pub h: Vec<Vec<f64>>,
    /// discrete L²((0,T)×ω) norm of h
    pub cost: f64,
    /// u in the H⁻² surrogate
    pub initial_u_norm: f64,
    pub terminal_u_norm: f64,
    /// v in the H⁻¹ surrogate
    pub terminal_v_norm: f64,
    /// max of the v norm over the last 10% of steps
    pub v_tail_max: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    /// optimal terminal adjoint data, packed `[σ_T, ψ_T]` for the relaxed system
    pub dual: Vec<f64>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Conjugate gradient for an operator symmetric positive definite in the
/// inner product `inner`. Stops on relative residual ≤ `tol`.
pub fn conjugate_gradient<A, I>(
    mut apply: A,
    rhs: &[f64],
    inner: I,
    tol: f64,
    maxit: usize,
) -> Result<CgOutcome>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    I: Fn(&[f64], &[f64]) -> f64,
{
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let rhs_norm = inner(rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = inner(&r, &r);
    for it in 1..=maxit {
        let ap = apply(&p)?;
        let pap = inner(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::CgFailure {
                iterations: it,
                residual: rr.sqrt() / rhs_norm,
            });
        }
        let alpha = rr / pap;
        axpy_in(&mut x, alpha, &p);
        axpy_in(&mut r, -alpha, &ap);
        let rr_new = inner(&r, &r);
        let rel = rr_new.sqrt() / rhs_norm;
        if rel <= tol {
            return Ok(CgOutcome {
                x,
                iterations: it,
                residual: rel,
            });
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    Err(Error::CgFailure {
        iterations: maxit,
        residual: rr.sqrt() / rhs_norm,
    })
}

/// One control problem on a fixed mesh: packs terminal data, applies the
/// Gramian and maps dual data to controls.
pub struct ControlProblem<'a> {
    ops: &'a OperatorSet,
    stepper: Stepper<'a>,
    mesh: TimeMesh,
    window: ControlWindow,
}

impl<'a> ControlProblem<'a> {
    pub fn new(
        ops: &'a OperatorSet,
        params: SystemParams,
        window: ControlWindow,
        mesh: TimeMesh,
    ) -> Result<Self> {
        window.validate()?;
        Ok(Self {
            ops,
            stepper: Stepper::new(ops, params)?,
            mesh,
            window,
        })
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn stepper(&mut self) -> &mut Stepper<'a> {
        &mut self.stepper
    }

    fn n(&self) -> usize {
        self.stepper.ops().n()
    }

    fn eps(&self) -> Option<f64> {
        match self.stepper.params().eps {
            Eps::Elliptic => None,
            Eps::Parabolic(e) => Some(e),
        }
    }

    /// Length of packed terminal vectors.
    pub fn dim(&self) -> usize {
        if self.eps().is_some() {
            2 * self.n()
        } else {
            self.n()
        }
    }

    /// Terminal pairing `⟨u,σ⟩ + ε⟨v,ψ⟩` on packed vectors.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self_inner(self.ops, self.eps(), a, b)
    }

    fn pack(&self, traj: &Trajectory) -> Vec<f64> {
        let mut z = traj.final_u().to_vec();
        if self.eps().is_some() {
            z.extend_from_slice(traj.final_v());
        }
        z
    }

    pub fn adjoint(&mut self, dual: &[f64]) -> Result<Trajectory> {
        let n = self.n();
        let (s, p) = if self.eps().is_some() {
            (&dual[..n], Some(&dual[n..]))
        } else {
            (dual, None)
        };
        self.stepper.adjoint(&self.mesh, s, p, None, None)
    }

    /// Control induced by terminal adjoint data.
    pub fn control_from_dual(&mut self, dual: &[f64]) -> Result<Vec<Vec<f64>>> {
        let adj = self.adjoint(dual)?;
        Ok(self.stepper.observation(&adj, &self.window))
    }

    pub fn run(
        &mut self,
        u0: &[f64],
        v0: Option<&[f64]>,
        h: Option<&[Vec<f64>]>,
    ) -> Result<Trajectory> {
        let zeros;
        let v0 = match (self.eps(), v0) {
            (Some(_), None) => {
                zeros = vec![0.0; self.n()];
                Some(&zeros[..])
            }
            (_, v) => v,
        };
        let window = self.window;
        let control = h.map(|values| Control {
            window: &window,
            values,
        });
        self.stepper
            .forward(&self.mesh, u0, v0, control, None, None)
    }

    /// Terminal state reached from rest under the control induced by `dual`.
    pub fn gramian_apply(&mut self, dual: &[f64]) -> Result<Vec<f64>> {
        let h = self.control_from_dual(dual)?;
        let zero = vec![0.0; self.n()];
        let t = self.run(&zero, None, Some(&h))?;
        Ok(self.pack(&t))
    }

    pub fn free_terminal(&mut self, u0: &[f64], v0: Option<&[f64]>) -> Result<Vec<f64>> {
        let t = self.run(u0, v0, None)?;
        Ok(self.pack(&t))
    }

    /// `sqrt(Σₖ dtₖ h Σᵢ hₖᵢ²)`.
    pub fn cost(&self, h: &[Vec<f64>]) -> f64 {
        let g = &self.stepper.ops().grid;
        self.mesh
            .dts()
            .iter()
            .zip(h)
            .map(|(dt, hk)| dt * g.inner(hk, hk))
            .sum::<f64>()
            .sqrt()
    }

    /// Solves the penalized dual problem and replays the control.
    pub fn solve(
        &mut self,
        u0: &[f64],
        v0: Option<&[f64]>,
        cfg: &HumConfig,
        realizer: &NegNormRealizer,
    ) -> Result<ControlResult> {
        cfg.validate()?;
        let free = self.free_terminal(u0, v0)?;
        let rhs: Vec<f64> = free.iter().map(|x| -x).collect();
        let pen = cfg.penalty;
        let out = {
            let (ops, eps) = (self.ops, self.eps());
            let inner = move |a: &[f64], b: &[f64]| self_inner(ops, eps, a, b);
            let mut apply = |x: &[f64]| -> Result<Vec<f64>> {
                let mut y = self.gramian_apply(x)?;
                axpy_in(&mut y, pen, x);
                Ok(y)
            };
            conjugate_gradient(&mut apply, &rhs, inner, cfg.cg_tol, cfg.cg_maxit)?
        };
        let h = self.control_from_dual(&out.x)?;
        let traj = self.run(u0, v0, Some(&h))?;
        let cost = self.cost(&h);
        let steps = traj.steps();
        let tail_start = steps - (steps / 10).max(1);
        let v_tail_max = traj.v[tail_start..]
            .iter()
            .map(|v| realizer.norm(v, NegOrder::MinusOne))
            .fold(0.0, f64::max);
        Ok(ControlResult {
            cost,
            initial_u_norm: realizer.norm(u0, NegOrder::MinusTwo),
            terminal_u_norm: realizer.norm(traj.final_u(), NegOrder::MinusTwo),
            terminal_v_norm: realizer.norm(traj.final_v(), NegOrder::MinusOne),
            v_tail_max,
            cg_iterations: out.iterations,
            cg_residual: out.residual,
            dual: out.x,
            h,
            trajectory: traj,
        })
    }
}

fn self_inner(ops: &OperatorSet, eps: Option<f64>, a: &[f64], b: &[f64]) -> f64 {
    let n = ops.n();
    match eps {
        None => ops.grid.inner(a, b),
        Some(e) => ops.grid.inner(&a[..n], &b[..n]) + e * ops.grid.inner(&a[n..], &b[n..]),
    }
}

fn elliptic_only(params: &SystemParams) -> Result<()> {
    if let Eps::Parabolic(_) = params.eps {
        return Err(Error::InvalidInput(
            "expected the elliptic limit; use the relaxed-system entry points".into(),
        ));
    }
    Ok(())
}

pub fn gramian_apply(
    sigma_t: &[f64],
    params: &SystemParams,
    ops: &OperatorSet,
    window: &ControlWindow,
    t_final: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    elliptic_only(params)?;
    ControlProblem::new(ops, *params, *window, TimeMesh::uniform(t_final, steps)?)?
        .gramian_apply(sigma_t)
}

pub fn compute_null_control(
    u0: &[f64],
    params: &SystemParams,
    ops: &OperatorSet,
    t_final: f64,
    steps: usize,
    cfg: &HumConfig,
) -> Result<ControlResult> {
    elliptic_only(params)?;
    let realizer = NegNormRealizer::new(ops);
    ControlProblem::new(ops, *params, cfg.window, TimeMesh::uniform(t_final, steps)?)?
        .solve(u0, None, cfg, &realizer)
}

#[allow(clippy::too_many_arguments)]
pub fn compute_null_control_eps(
    u0: &[f64],
    v0: &[f64],
    params: &SystemParams,
    ops: &OperatorSet,
    t_final: f64,
    steps: usize,
    cfg: &HumConfig,
) -> Result<ControlResult> {
    if let Eps::Elliptic = params.eps {
        return Err(Error::InvalidInput(
            "the relaxed system needs eps in (0,1]".into(),
        ));
    }
    let realizer = NegNormRealizer::new(ops);
    ControlProblem::new(ops, *params, cfg.window, TimeMesh::uniform(t_final, steps)?)?.solve(
        u0,
        Some(v0),
        cfg,
        &realizer,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonFailure {
    pub horizon: f64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostCurve {
    pub horizons: Vec<f64>,
    pub steps: Vec<usize>,
    pub costs: Vec<f64>,
    /// slope of log(cost) against 1/T
    pub fit_k: Option<f64>,
    pub fit_offset: Option<f64>,
    pub r_squared: Option<f64>,
    pub failures: Vec<HorizonFailure>,
}

pub const MIN_SWEEP_STEPS: usize = 16;

pub fn steps_for_horizon(t_final: f64, steps_per_unit_time: f64) -> usize {
    ((steps_per_unit_time * t_final).round() as usize).max(MIN_SWEEP_STEPS)
}

/// Least-squares line `y = slope·x + offset` with its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let offset = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - offset).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Some((slope, offset, r2))
}

/// Runs one control per horizon and fits `log(cost) = K/T + offset`.
#[allow(clippy::too_many_arguments)]
pub fn cost_sweep(
    u0: &[f64],
    params: &SystemParams,
    ops: &OperatorSet,
    horizons: &[f64],
    steps_per_unit_time: f64,
    cfg: &HumConfig,
) -> Result<CostCurve> {
    elliptic_only(params)?;
    if horizons.is_empty() {
        return Err(Error::InvalidInput("cost sweep needs horizons".into()));
    }
    if horizons.iter().any(|&t| !(t > 0.0 && t <= 2.0)) {
        return Err(Error::InvalidInput("horizons must lie in (0, 2]".into()));
    }
    if horizons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput(
            "horizons must be strictly decreasing".into(),
        ));
    }
    let realizer = NegNormRealizer::new(ops);
    let mut curve = CostCurve {
        horizons: Vec::new(),
        steps: Vec::new(),
        costs: Vec::new(),
        fit_k: None,
        fit_offset: None,
        r_squared: None,
        failures: Vec::new(),
    };
    for &t in horizons {
        let m = steps_for_horizon(t, steps_per_unit_time);
        let mut problem = ControlProblem::new(ops, *params, cfg.window, TimeMesh::uniform(t, m)?)?;
        match problem.solve(u0, None, cfg, &realizer) {
            Ok(r) => {
                curve.horizons.push(t);
                curve.steps.push(m);
                curve.costs.push(r.cost);
            }
            Err(e @ Error::CgFailure { .. }) => curve.failures.push(HorizonFailure {
                horizon: t,
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    if curve.costs.iter().all(|&c| c > 0.0 && c.is_finite()) {
        let x: Vec<f64> = curve.horizons.iter().map(|t| 1.0 / t).collect();
        let y: Vec<f64> = curve.costs.iter().map(|c| c.ln()).collect();
        if let Some((k, off, r2)) = linear_fit(&x, &y) {
            curve.fit_k = Some(k);
            curve.fit_offset = Some(off);
            curve.r_squared = Some(r2);
        }
    }
    Ok(curve)
}

/// Observed adjoint component for a channel, for reporting.
pub fn observed_component(channel: Channel) -> &'static str {
    match channel {
        Channel::Ks => "sigma",
        Channel::Elliptic => "psi",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_grid, build_operators};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn ops(n: usize) -> OperatorSet {
        build_operators(&build_grid(n).unwrap())
    }

    fn desk() -> SystemParams {
        SystemParams::new(1.0, 1.0, 1.0, 1.0, 0.0)
    }

    fn u0_of(o: &OperatorSet) -> Vec<f64> {
        o.grid
            .sample(|x| (PI * x).sin().powi(2) * (3.0 * PI * x).sin() + x * (1.0 - x))
    }

    #[test]
    fn gramian_symmetric_and_nonnegative() {
        let o = ops(16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (params, target) in [
            (desk(), Channel::Ks),
            (desk(), Channel::Elliptic),
            (desk().with_eps(0.05), Channel::Elliptic),
        ] {
            let w = ControlWindow::new(0.3, 0.7, target).unwrap();
            let mut p =
                ControlProblem::new(&o, params, w, TimeMesh::uniform(0.2, 20).unwrap()).unwrap();
            let d = p.dim();
            for _ in 0..5 {
                let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let la = p.gramian_apply(&a).unwrap();
                let lb = p.gramian_apply(&b).unwrap();
                let (x, y) = (p.inner(&la, &b), p.inner(&a, &lb));
                assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()), "{x} {y}");
                assert!(p.inner(&la, &a) >= 0.0);
            }
        }
    }

    #[test]
    fn zero_data_gives_zero_control() {
        let o = ops(16);
        let w = ControlWindow::new(0.3, 0.7, Channel::Ks).unwrap();
        let r =
            compute_null_control(&vec![0.0; 16], &desk(), &o, 1.0, 16, &HumConfig::new(w)).unwrap();
        assert_eq!(r.cost, 0.0);
        assert!(r.h.iter().all(|h| h.iter().all(|&x| x == 0.0)));
        let we = ControlWindow::new(0.3, 0.7, Channel::Elliptic).unwrap();
        let z = vec![0.0; 16];
        let r = compute_null_control_eps(
            &z,
            &z,
            &desk().with_eps(0.1),
            &o,
            1.0,
            16,
            &HumConfig::new(we),
        )
        .unwrap();
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn cg_matches_dense_direct_solve() {
        let n = 12;
        let o = ops(n);
        for target in [Channel::Ks, Channel::Elliptic] {
            let w = ControlWindow::new(0.3, 0.7, target).unwrap();
            let mesh = TimeMesh::uniform(0.1, 16).unwrap();
            let cfg = HumConfig::new(w).with_penalty(1e-6);
            let mut p = ControlProblem::new(&o, desk(), w, mesh).unwrap();
            let mut g = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                g.set_column(j, &DVector::from_vec(p.gramian_apply(&e).unwrap()));
            }
            let u0 = u0_of(&o);
            let free = p.free_terminal(&u0, None).unwrap();
            let phi = (g + DMatrix::identity(n, n) * cfg.penalty)
                .lu()
                .solve(&DVector::from_iterator(n, free.iter().map(|x| -x)))
                .unwrap();
            let realizer = NegNormRealizer::new(&o);
            let r = p.solve(&u0, None, &cfg, &realizer).unwrap();
            let diff: f64 = r
                .dual
                .iter()
                .zip(phi.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                diff <= 1e-6 * phi.norm(),
                "{target}: {diff} vs {}",
                phi.norm()
            );
            // terminal state equals −penalty·φ*
            let lhs: Vec<f64> = r.dual.iter().map(|x| -cfg.penalty * x).collect();
            let err = r
                .trajectory
                .final_u()
                .iter()
                .zip(&lhs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-6 * lhs.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-300);
        }
    }

    #[test]
    fn cost_identity_from_duality() {
        let o = ops(16);
        let w = ControlWindow::new(0.3, 0.7, Channel::Ks).unwrap();
        let cfg = HumConfig::new(w).with_penalty(1e-4);
        let mut p =
            ControlProblem::new(&o, desk(), w, TimeMesh::uniform(0.05, 20).unwrap()).unwrap();
        let realizer = NegNormRealizer::new(&o);
        let u0 = u0_of(&o);
        let r = p.solve(&u0, None, &cfg, &realizer).unwrap();
        let mut lhs = p.gramian_apply(&r.dual).unwrap();
        axpy_in(&mut lhs, cfg.penalty, &r.dual);
        let predicted = p.inner(&lhs, &r.dual) - cfg.penalty * p.inner(&r.dual, &r.dual);
        assert!((predicted - r.cost * r.cost).abs() <= 1e-8 * r.cost * r.cost);
    }

    #[test]
    fn fit_recovers_exact_line() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let (k, off, r2) = linear_fit(&x, &y).unwrap();
        assert!((k - 3.0).abs() < 1e-12 && (off + 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn sweep_validates_horizons() {
        let o = ops(16);
        let w = ControlWindow::new(0.3, 0.7, Channel::Ks).unwrap();
        let cfg = HumConfig::new(w);
        let u0 = u0_of(&o);
        assert!(cost_sweep(&u0, &desk(), &o, &[0.5, 1.0], 64.0, &cfg).is_err());
        assert!(cost_sweep(&u0, &desk(), &o, &[3.0, 1.0], 64.0, &cfg).is_err());
    }

    #[test]
    fn cg_reports_exhaustion() {
        let r = conjugate_gradient(
            |x: &[f64]| {
                Ok(x.iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64 + 1.0) * v)
                    .collect())
            },
            &[1.0, 1.0, 1.0, 1.0],
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum(),
            1e-14,
            2,
        );
        assert!(matches!(r, Err(Error::CgFailure { iterations: 2, .. })));
    }
}
