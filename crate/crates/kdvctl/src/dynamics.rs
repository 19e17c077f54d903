//! Time stepping for the forward systems and their discrete adjoints.
//!
//! The forward step for the parabolic-elliptic system is
//!
//! ```text
//! y       = P⁻¹ (uᵏ + dt (fᵏ + χhᵏ))          P = I + dt (γ₁D4 + D3 + γ₂D2)
//! vᵏ⁺¹    = S (b y + χhᵏ)                      S = (L + cI)⁻¹
//! uᵏ⁺¹    = y + dt a vᵏ⁺¹
//! ```
//!
//! with the control entering only one of the two equations. The relaxed
//! system replaces the elliptic solve by `vᵏ⁺¹ = Q⁻¹(vᵏ + dt/ε (b y + χhᵏ))`,
//! `Q = I + dt/ε (L + cI)`, which reduces to the elliptic step as ε → 0.
//! Adjoint steps are the exact transposes, so the discrete duality pairing
//! holds to roundoff.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::banded::{BandLu, BandMatrix};
use crate::discretization::{EllipticSolver, Grid, OperatorSet};
use crate::error::{Error, Result};

pub const DEFAULT_BLOWUP_GUARD: f64 = 1e6;

/// ε of the relaxed system, or the elliptic limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpsRepr", into = "EpsRepr")]
pub enum Eps {
    Elliptic,
    Parabolic(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EpsRepr {
    Tag(String),
    Value(f64),
}

impl TryFrom<EpsRepr> for Eps {
    type Error = String;
    fn try_from(r: EpsRepr) -> std::result::Result<Self, String> {
        match r {
            EpsRepr::Tag(s) if s == "elliptic" => Ok(Eps::Elliptic),
            EpsRepr::Tag(s) => Err(format!(
                "eps must be a number in (0,1] or \"elliptic\", got \"{s}\""
            )),
            EpsRepr::Value(v) => Ok(Eps::Parabolic(v)),
        }
    }
}

impl From<Eps> for EpsRepr {
    fn from(e: Eps) -> Self {
        match e {
            Eps::Elliptic => EpsRepr::Tag("elliptic".into()),
            Eps::Parabolic(v) => EpsRepr::Value(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(default = "elliptic")]
    pub eps: Eps,
}

fn elliptic() -> Eps {
    Eps::Elliptic
}

impl SystemParams {
    pub fn new(gamma1: f64, gamma2: f64, a: f64, b: f64, c: f64) -> Self {
        Self {
            gamma1,
            gamma2,
            a,
            b,
            c,
            eps: Eps::Elliptic,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = Eps::Parabolic(eps);
        self
    }

    /// Solver-level checks. `gamma2 = 0` is accepted so the anti-diffusion
    /// can be switched off in energy tests.
    pub fn validate(&self, ops: &OperatorSet) -> Result<()> {
        if !(self.gamma1 > 0.0) || !self.gamma1.is_finite() {
            return Err(Error::InvalidInput(format!(
                "gamma1 must be positive, got {}",
                self.gamma1
            )));
        }
        if !(self.gamma2 >= 0.0) || !self.gamma2.is_finite() {
            return Err(Error::InvalidInput(format!(
                "gamma2 must be nonnegative, got {}",
                self.gamma2
            )));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::InvalidInput(
                "coupling coefficients must be finite".into(),
            ));
        }
        let bound = -ops.lambda_min_dirichlet();
        if !(self.c > bound * (1.0 - 1e-10)) {
            return Err(Error::NonCoercive { c: self.c, bound });
        }
        if let Eps::Parabolic(e) = self.eps {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "eps must lie in (0,1], got {e}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// control acts in the fourth-order equation
    Ks,
    /// control acts in the elliptic (or relaxed) equation
    Elliptic,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Ks => "ks",
            Channel::Elliptic => "elliptic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlWindow {
    pub l1: f64,
    pub l2: f64,
    pub target: Channel,
}

impl ControlWindow {
    pub fn new(l1: f64, l2: f64, target: Channel) -> Result<Self> {
        let w = Self { l1, l2, target };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.l1 && self.l1 < self.l2 && self.l2 < 1.0) {
            return Err(Error::InvalidInput(format!(
                "control window must satisfy 0 < l1 < l2 < 1, got ({}, {})",
                self.l1, self.l2
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64) -> bool {
        self.l1 < x && x < self.l2
    }

    /// Sharp indicator of ω at the grid nodes.
    pub fn mask(&self, grid: &Grid) -> Vec<f64> {
        grid.nodes()
            .iter()
            .map(|&x| if self.contains(x) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Piecewise-uniform time mesh: consecutive segments of equal steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMesh {
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeMesh {
    pub fn uniform(t_final: f64, steps: usize) -> Result<Self> {
        Self::from_segments(vec![Segment {
            start: 0.0,
            dt: t_final / steps as f64,
            steps,
        }])
    }

    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidInput(
                "time mesh needs at least one segment".into(),
            ));
        }
        for s in &segments {
            if s.steps == 0 || !(s.dt > 0.0) || !s.dt.is_finite() {
                return Err(Error::InvalidInput(format!("bad time segment {s:?}")));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn steps(&self) -> usize {
        self.segments.iter().map(|s| s.steps).sum()
    }

    /// Step sizes, one per step.
    pub fn dts(&self) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat(s.dt).take(s.steps))
            .collect()
    }

    /// All node times, `steps() + 1` values.
    pub fn times(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.steps() + 1);
        for s in &self.segments {
            for j in 0..s.steps {
                t.push(s.start + j as f64 * s.dt);
            }
        }
        let last = self.segments.last().unwrap();
        t.push(last.start + last.steps as f64 * last.dt);
        t
    }

    pub fn final_time(&self) -> f64 {
        let last = self.segments.last().unwrap();
        last.start + last.steps as f64 * last.dt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// u for forward runs, σ for adjoint runs
    pub u: Vec<Vec<f64>>,
    /// v for forward runs, ψ for adjoint runs
    pub v: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_u(&self) -> &[f64] {
        self.u.last().unwrap()
    }

    pub fn final_v(&self) -> &[f64] {
        self.v.last().unwrap()
    }

    pub fn is_zero(&self) -> bool {
        self.u
            .iter()
            .chain(&self.v)
            .all(|f| f.iter().all(|&x| x == 0.0))
    }
}

/// Forcing sampled at the time nodes; step k uses `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerm {
    pub values: Vec<Vec<f64>>,
}

impl SourceTerm {
    pub fn zeros(nodes: usize, n: usize) -> Self {
        Self {
            values: vec![vec![0.0; n]; nodes],
        }
    }

    pub fn sample(times: &[f64], grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            values: times
                .iter()
                .map(|&t| grid.nodes().iter().map(|&x| f(t, x)).collect())
                .collect(),
        }
    }
}

/// Control samples per step on the full grid; the window mask is applied
/// when injected.
#[derive(Debug, Clone, Copy)]
pub struct Control<'a> {
    pub window: &'a ControlWindow,
    pub values: &'a [Vec<f64>],
}

/// Factorizations for one step size.
#[derive(Debug, Clone)]
struct StepFactors {
    forward: BandLu,
    backward: BandLu,
    relax: Option<BandLu>,
}

/// Shared stepping machinery, caching factorizations per step size.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    ops: &'a OperatorSet,
    params: SystemParams,
    stiff: BandMatrix,
    elliptic: EllipticSolver,
    cache: HashMap<u64, StepFactors>,
}

impl<'a> Stepper<'a> {
    pub fn new(ops: &'a OperatorSet, params: SystemParams) -> Result<Self> {
        params.validate(ops)?;
        let stiff = ops
            .d4
            .scaled(params.gamma1)
            .axpy(1.0, &ops.d3)
            .axpy(params.gamma2, &ops.d2);
        let elliptic = ops.elliptic(params.c)?;
        Ok(Self {
            ops,
            params,
            stiff,
            elliptic,
            cache: HashMap::new(),
        })
    }

    pub fn ops(&self) -> &OperatorSet {
        self.ops
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn elliptic(&self) -> &EllipticSolver {
        &self.elliptic
    }

    /// γ₁D4 + D3 + γ₂D2.
    pub fn stiff_operator(&self) -> &BandMatrix {
        &self.stiff
    }

    fn eps_value(&self) -> Option<f64> {
        match self.params.eps {
            Eps::Elliptic => None,
            Eps::Parabolic(e) => Some(e),
        }
    }

    fn factors(&mut self, dt: f64) -> Result<&StepFactors> {
        let key = dt.to_bits();
        if !self.cache.contains_key(&key) {
            let n = self.ops.n();
            let p = BandMatrix::identity(n).axpy(dt, &self.stiff);
            let forward = p.lu()?;
            let backward = p.transpose().lu()?;
            let relax = match self.eps_value() {
                Some(e) => Some(
                    BandMatrix::identity(n)
                        .axpy(dt / e, self.elliptic.matrix())
                        .lu()?,
                ),
                None => None,
            };
            self.cache.insert(
                key,
                StepFactors {
                    forward,
                    backward,
                    relax,
                },
            );
        }
        Ok(&self.cache[&key])
    }

    /// Forward run of either system under the params' ε setting.
    ///
    /// `nonlinear` switches on the explicit −F(uᵏ) term with the given
    /// blowup guard on ‖u‖∞.
    pub fn forward(
        &mut self,
        mesh: &TimeMesh,
        u0: &[f64],
        v0: Option<&[f64]>,
        control: Option<Control<'_>>,
        source: Option<&SourceTerm>,
        nonlinear: Option<f64>,
    ) -> Result<Trajectory> {
        let n = self.ops.n();
        check_len(u0, n, "u0")?;
        let steps = mesh.steps();
        if let Some(c) = &control {
            c.window.validate()?;
            if c.values.len() < steps {
                return Err(Error::InvalidInput(format!(
                    "control has {} samples, mesh needs {steps}",
                    c.values.len()
                )));
            }
        }
        if let Some(f) = source {
            if f.values.len() < steps {
                return Err(Error::InvalidInput(format!(
                    "source has {} samples, mesh needs {steps}",
                    f.values.len()
                )));
            }
        }
        let mask = control.map(|c| c.window.mask(&self.ops.grid));
        let target = control.map(|c| c.window.target);
        let SystemParams { a, b, .. } = self.params;
        let eps = self.eps_value();
        let v_init = match (eps, v0) {
            (Some(_), Some(v)) => {
                check_len(v, n, "v0")?;
                v.to_vec()
            }
            (Some(_), None) => {
                return Err(Error::InvalidInput("the relaxed system needs v0".into()));
            }
            (None, _) => self.elliptic.solve(&scale(b, u0)),
        };

        let times = mesh.times();
        let dts = mesh.dts();
        let mut us = Vec::with_capacity(steps + 1);
        let mut vs = Vec::with_capacity(steps + 1);
        us.push(u0.to_vec());
        vs.push(v_init);
        for k in 0..steps {
            let dt = dts[k];
            let u = &us[k];
            let mut r = u.clone();
            if let Some(f) = source {
                axpy_in(&mut r, dt, &f.values[k]);
            }
            if nonlinear.is_some() {
                axpy_in(&mut r, -dt, &apply_f(self.ops, u));
            }
            let hk = control.map(|c| &c.values[k]);
            if let (Some(Channel::Ks), Some(h), Some(m)) = (target, hk, &mask) {
                for i in 0..n {
                    r[i] += dt * m[i] * h[i];
                }
            }
            let elliptic_forcing: Option<Vec<f64>> = match (target, hk, &mask) {
                (Some(Channel::Elliptic), Some(h), Some(m)) => {
                    Some((0..n).map(|i| m[i] * h[i]).collect())
                }
                _ => None,
            };
            let fac = self.factors(dt)?;
            let y = fac.forward.solve(&r);
            let mut w = scale(b, &y);
            if let Some(e) = &elliptic_forcing {
                axpy_in(&mut w, 1.0, e);
            }
            let v_next = match eps {
                None => self.elliptic.solve(&w),
                Some(e) => {
                    let mut rhs = vs[k].clone();
                    axpy_in(&mut rhs, dt / e, &w);
                    self.factors(dt)?.relax.as_ref().unwrap().solve(&rhs)
                }
            };
            let mut u_next = y;
            axpy_in(&mut u_next, dt * a, &v_next);
            let sup = sup_norm(&u_next);
            let guard = nonlinear.unwrap_or(f64::INFINITY);
            if !sup.is_finite() || sup > guard || v_next.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    time: times[k + 1],
                    norm: sup,
                });
            }
            us.push(u_next);
            vs.push(v_next);
        }
        Ok(Trajectory {
            times,
            u: us,
            v: vs,
        })
    }

    /// Backward run of the transposed scheme from terminal data.
    ///
    /// Sources `g1` (σ equation) and `g2` (ψ equation, relaxed system only)
    /// are sampled like forward sources, step k uses index k.
    pub fn adjoint(
        &mut self,
        mesh: &TimeMesh,
        sigma_t: &[f64],
        psi_t: Option<&[f64]>,
        g1: Option<&SourceTerm>,
        g2: Option<&SourceTerm>,
    ) -> Result<Trajectory> {
        let n = self.ops.n();
        check_len(sigma_t, n, "sigma_T")?;
        let steps = mesh.steps();
        for g in [g1, g2].into_iter().flatten() {
            if g.values.len() < steps {
                return Err(Error::InvalidInput("adjoint source too short".into()));
            }
        }
        let SystemParams { a, b, .. } = self.params;
        let eps = self.eps_value();
        let times = mesh.times();
        let dts = mesh.dts();
        let mut sig = vec![Vec::new(); steps + 1];
        let mut psi = vec![Vec::new(); steps + 1];
        sig[steps] = sigma_t.to_vec();
        psi[steps] = match (eps, psi_t) {
            (Some(_), Some(p)) => {
                check_len(p, n, "psi_T")?;
                p.to_vec()
            }
            (Some(_), None) => {
                return Err(Error::InvalidInput(
                    "the relaxed adjoint needs psi_T".into(),
                ))
            }
            (None, _) => scale(a, &self.elliptic.solve(sigma_t)),
        };
        for k in (0..steps).rev() {
            let dt = dts[k];
            let psi_k = match eps {
                None => None,
                Some(e) => {
                    let mut rhs = psi[k + 1].clone();
                    axpy_in(&mut rhs, dt / e * a, &sig[k + 1]);
                    if let Some(g) = g2 {
                        axpy_in(&mut rhs, dt / e, &g.values[k]);
                    }
                    Some(self.factors(dt)?.relax.as_ref().unwrap().solve(&rhs))
                }
            };
            let mut rhs = sig[k + 1].clone();
            match &psi_k {
                None => axpy_in(&mut rhs, dt * b, &psi[k + 1]),
                Some(p) => axpy_in(&mut rhs, dt * b, p),
            }
            if let Some(g) = g1 {
                axpy_in(&mut rhs, dt, &g.values[k]);
            }
            let s = self.factors(dt)?.backward.solve(&rhs);
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    time: times[k],
                    norm: sup_norm(&s),
                });
            }
            psi[k] = match psi_k {
                Some(p) => p,
                None => scale(a, &self.elliptic.solve(&s)),
            };
            sig[k] = s;
        }
        Ok(Trajectory {
            times,
            u: sig,
            v: psi,
        })
    }

    /// Adjoint samples that pair with the control in the duality identity:
    /// `Σₖ dtₖ ⟨χhᵏ, obsᵏ⟩`, masked to ω.
    pub fn observation(&self, adjoint: &Trajectory, window: &ControlWindow) -> Vec<Vec<f64>> {
        let mask = window.mask(&self.ops.grid);
        let steps = adjoint.steps();
        (0..steps)
            .map(|k| {
                let src = match (window.target, self.params.eps) {
                    (Channel::Ks, _) => &adjoint.u[k],
                    (Channel::Elliptic, Eps::Elliptic) => &adjoint.v[k + 1],
                    (Channel::Elliptic, Eps::Parabolic(_)) => &adjoint.v[k],
                };
                src.iter().zip(&mask).map(|(s, m)| s * m).collect()
            })
            .collect()
    }
}

fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::InvalidInput(format!(
            "{what} has length {}, grid has {n}",
            v.len()
        )));
    }
    Ok(())
}

pub(crate) fn scale(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub(crate) fn axpy_in(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(
        0.0f64,
        |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) },
    )
}

/// Discrete weak form of u uₓ: the vector whose pairing with φ is
/// −½⟨u², D1φ⟩, i.e. ½ D1(u²) since D1 is antisymmetric.
pub fn apply_f(ops: &OperatorSet, u: &[f64]) -> Vec<f64> {
    let sq: Vec<f64> = u.iter().map(|x| 0.5 * x * x).collect();
    ops.d1.apply(&sq)
}

fn require_eps(params: &SystemParams, want_elliptic: bool) -> Result<()> {
    match (params.eps, want_elliptic) {
        (Eps::Elliptic, true) | (Eps::Parabolic(_), false) => Ok(()),
        (Eps::Parabolic(_), true) => Err(Error::InvalidInput(
            "expected the elliptic limit (eps = \"elliptic\")".into(),
        )),
        (Eps::Elliptic, false) => Err(Error::InvalidInput("expected eps in (0,1]".into())),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn solve_forward_linear(
    params: &SystemParams,
    ops: &OperatorSet,
    u0: &[f64],
    control: Option<Control<'_>>,
    source: Option<&SourceTerm>,
    t_final: f64,
    steps: usize,
) -> Result<Trajectory> {
    require_eps(params, true)?;
    let mesh = TimeMesh::uniform(t_final, steps)?;
    Stepper::new(ops, *params)?.forward(&mesh, u0, None, control, source, None)
}

pub fn solve_forward_nonlinear(
    params: &SystemParams,
    ops: &OperatorSet,
    u0: &[f64],
    control: Option<Control<'_>>,
    t_final: f64,
    steps: usize,
    guard: f64,
) -> Result<Trajectory> {
    require_eps(params, true)?;
    let mesh = TimeMesh::uniform(t_final, steps)?;
    Stepper::new(ops, *params)?.forward(&mesh, u0, None, control, None, Some(guard))
}

#[allow(clippy::too_many_arguments)]
pub fn solve_forward_eps(
    params: &SystemParams,
    ops: &OperatorSet,
    u0: &[f64],
    v0: &[f64],
    control: Option<Control<'_>>,
    t_final: f64,
    steps: usize,
) -> Result<Trajectory> {
    require_eps(params, false)?;
    let mesh = TimeMesh::uniform(t_final, steps)?;
    Stepper::new(ops, *params)?.forward(&mesh, u0, Some(v0), control, None, None)
}

pub fn solve_adjoint(
    params: &SystemParams,
    ops: &OperatorSet,
    sigma_t: &[f64],
    g: Option<&SourceTerm>,
    t_final: f64,
    steps: usize,
) -> Result<Trajectory> {
    require_eps(params, true)?;
    let mesh = TimeMesh::uniform(t_final, steps)?;
    Stepper::new(ops, *params)?.adjoint(&mesh, sigma_t, None, g, None)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_adjoint_eps(
    params: &SystemParams,
    ops: &OperatorSet,
    sigma_t: &[f64],
    psi_t: &[f64],
    g1: Option<&SourceTerm>,
    g2: Option<&SourceTerm>,
    t_final: f64,
    steps: usize,
) -> Result<Trajectory> {
    require_eps(params, false)?;
    let mesh = TimeMesh::uniform(t_final, steps)?;
    Stepper::new(ops, *params)?.adjoint(&mesh, sigma_t, Some(psi_t), g1, g2)
}

/// Residual of the discrete duality identity
/// `⟨u(T),σ(T)⟩ + ε⟨v(T),ψ(T)⟩ − ⟨u₀,σ(0)⟩ − ε⟨v₀,ψ(0)⟩ − Σ dt⟨χh,obs⟩ − Σ dt⟨f,σ⟩`,
/// relative to the largest term.
pub fn duality_residual(
    stepper: &Stepper<'_>,
    forward: &Trajectory,
    adjoint: &Trajectory,
    control: Option<Control<'_>>,
    source: Option<&SourceTerm>,
) -> f64 {
    let grid = &stepper.ops().grid;
    let steps = forward.steps();
    let dts: Vec<f64> = forward.times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut terms = vec![
        grid.inner(forward.final_u(), adjoint.final_u()),
        -grid.inner(&forward.u[0], &adjoint.u[0]),
    ];
    if let Eps::Parabolic(e) = stepper.params().eps {
        terms.push(e * grid.inner(forward.final_v(), adjoint.final_v()));
        terms.push(-e * grid.inner(&forward.v[0], &adjoint.v[0]));
    }
    if let Some(c) = control {
        let obs = stepper.observation(adjoint, c.window);
        let mask = c.window.mask(grid);
        let mut acc = 0.0;
        for k in 0..steps {
            let hk: Vec<f64> = c.values[k].iter().zip(&mask).map(|(h, m)| h * m).collect();
            acc += dts[k] * grid.inner(&hk, &obs[k]);
        }
        terms.push(-acc);
    }
    if let Some(f) = source {
        let mut acc = 0.0;
        for k in 0..steps {
            acc += dts[k] * grid.inner(&f.values[k], &adjoint.u[k]);
        }
        terms.push(-acc);
    }
    let scale = terms.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let sum: f64 = terms.iter().sum();
    if scale == 0.0 {
        0.0
    } else {
        sum.abs() / scale
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

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_in_zero_out() {
        let o = ops(16);
        let p = desk();
        let t = solve_forward_linear(&p, &o, &vec![0.0; 16], None, None, 1.0, 10).unwrap();
        assert!(t.is_zero());
        let t = solve_forward_nonlinear(&p, &o, &vec![0.0; 16], None, 1.0, 10, 1e6).unwrap();
        assert!(t.is_zero());
        let t = solve_adjoint(&p, &o, &vec![0.0; 16], None, 1.0, 10).unwrap();
        assert!(t.is_zero());
        let pe = p.with_eps(0.1);
        let t = solve_forward_eps(&pe, &o, &vec![0.0; 16], &vec![0.0; 16], None, 1.0, 10).unwrap();
        assert!(t.is_zero());
        let t = solve_adjoint_eps(&pe, &o, &vec![0.0; 16], &vec![0.0; 16], None, None, 1.0, 10)
            .unwrap();
        assert!(t.is_zero());
    }

    #[test]
    fn matches_dense_one_step_oracle() {
        let n = 32;
        let m = 64;
        let o = ops(n);
        let p = SystemParams::new(1.0, 1.0, 0.7, -1.3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u0 = random(n, &mut rng);
        let t = solve_forward_linear(&p, &o, &u0, None, None, 1.0, m).unwrap();
        let dt = 1.0 / m as f64;
        let a_mat = o.d4.to_dense() * p.gamma1 + o.d3.to_dense() + o.d2.to_dense() * p.gamma2;
        let id = DMatrix::<f64>::identity(n, n);
        let pinv = (&id + &a_mat * dt).try_inverse().unwrap();
        let s = (o.l_dirichlet.to_dense() + &id * p.c)
            .try_inverse()
            .unwrap();
        let one_step = (&id + &s * (dt * p.a * p.b)) * pinv;
        let mut u = DVector::from_vec(u0);
        for _ in 0..m {
            u = &one_step * u;
        }
        let err = t
            .final_u()
            .iter()
            .zip(u.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = u.amax();
        assert!(err <= 1e-9 * scale.max(1e-300), "{err} vs {scale}");
    }

    #[test]
    fn decoupled_heat_mode_in_relaxed_system() {
        let n = 63;
        let o = ops(n);
        let p = SystemParams::new(1.0, 1.0, 0.0, 0.0, 0.0).with_eps(1.0);
        let v0 = o.grid.sample(|x| (PI * x).sin());
        let t = solve_forward_eps(&p, &o, &vec![0.0; n], &v0, None, 0.1, 400).unwrap();
        let exact = o
            .grid
            .sample(|x| (-PI * PI * 0.1f64).exp() * (PI * x).sin());
        let err = t
            .final_v()
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn duality_holds_for_both_systems_and_channels() {
        let n = 20;
        let m = 30;
        let o = ops(n);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mesh = TimeMesh::uniform(0.7, m).unwrap();
        for params in [
            desk(),
            desk().with_eps(0.3),
            SystemParams::new(0.5, 2.0, -0.4, 1.5, 1.0).with_eps(1e-3),
        ] {
            for target in [Channel::Ks, Channel::Elliptic] {
                let w = ControlWindow::new(0.2, 0.6, target).unwrap();
                let mut st = Stepper::new(&o, params).unwrap();
                let u0 = random(n, &mut rng);
                let v0 = random(n, &mut rng);
                let h: Vec<Vec<f64>> = (0..m).map(|_| random(n, &mut rng)).collect();
                let f = SourceTerm {
                    values: (0..=m).map(|_| random(n, &mut rng)).collect(),
                };
                let st_t = random(n, &mut rng);
                let ps_t = random(n, &mut rng);
                let c = Control {
                    window: &w,
                    values: &h,
                };
                let fw = st
                    .forward(&mesh, &u0, Some(&v0), Some(c), Some(&f), None)
                    .unwrap();
                let ad = st.adjoint(&mesh, &st_t, Some(&ps_t), None, None).unwrap();
                let r = duality_residual(&st, &fw, &ad, Some(c), Some(&f));
                assert!(r < 1e-12, "{params:?} {target} {r}");
            }
        }
    }

    #[test]
    fn nonlinearity_oracles() {
        let o = ops(40);
        let u = o.grid.sample(|x| x * (1.0 - x));
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert_eq!(apply_f(&o, &u), apply_f(&o, &neg));
        assert!(apply_f(&o, &vec![0.0; 40]).iter().all(|&x| x == 0.0));
        // u² = φ, so −½∫u²φₓ = −¼[φ²] = 0; the discrete pairing vanishes by antisymmetry of D1
        let phi = o.grid.sample(|x| x * x * (1.0 - x) * (1.0 - x));
        assert!(o.grid.inner(&apply_f(&o, &u), &phi).abs() < 1e-15);
    }

    #[test]
    fn nonlinearity_pairing_against_exact_integral() {
        // −½∫₀¹ x²(1−x)² (x²(1−x)³)' dx = 1/2520, by exact polynomial integration
        let exact = 1.0 / 2520.0;
        let mut errs = Vec::new();
        for n in [31, 63, 127] {
            let o = ops(n);
            let u = o.grid.sample(|x| x * (1.0 - x));
            let phi = o.grid.sample(|x| x * x * (1.0 - x).powi(3));
            errs.push((o.grid.inner(&apply_f(&o, &u), &phi) - exact).abs());
        }
        assert!(errs[2] < 1e-5 * 1.0, "{errs:?}");
        assert!(errs[0] / errs[2] > 10.0, "{errs:?}");
    }

    #[test]
    fn dissipation_without_anti_diffusion() {
        let n = 32;
        let o = ops(n);
        let p = SystemParams::new(1.0, 0.0, 0.0, 1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = solve_forward_linear(&p, &o, &random(n, &mut rng), None, None, 0.5, 64).unwrap();
        let e: Vec<f64> = t.u.iter().map(|u| o.grid.norm(u)).collect();
        assert!(e.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn blowup_guard_triggers() {
        let o = ops(16);
        let u0 = vec![50.0; 16];
        let p = SystemParams::new(1.0, 1.0, 0.0, 0.0, 0.0);
        let r = solve_forward_nonlinear(&p, &o, &u0, None, 1.0, 10, 1.0);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn eps_solvers_reject_elliptic_params() {
        let o = ops(16);
        let z = vec![0.0; 16];
        assert!(solve_forward_eps(&desk(), &o, &z, &z, None, 1.0, 4).is_err());
        assert!(solve_forward_linear(&desk().with_eps(0.5), &o, &z, None, None, 1.0, 4).is_err());
        assert!(solve_forward_linear(&desk().with_eps(1.5), &o, &z, None, None, 1.0, 4).is_err());
    }

    #[test]
    fn eps_config_roundtrip() {
        let p: SystemParams =
            serde_json::from_str(r#"{"gamma1":1,"gamma2":1,"a":1,"b":1,"c":0,"eps":"elliptic"}"#)
                .unwrap();
        assert_eq!(p.eps, Eps::Elliptic);
        let p: SystemParams =
            serde_json::from_str(r#"{"gamma1":1,"gamma2":1,"a":1,"b":1,"c":0,"eps":0.01}"#)
                .unwrap();
        assert_eq!(p.eps, Eps::Parabolic(0.01));
        assert!(serde_json::from_str::<SystemParams>(
            r#"{"gamma1":1,"gamma2":1,"a":1,"b":1,"c":0,"eps":"x"}"#
        )
        .is_err());
        assert!(serde_json::from_str::<SystemParams>(
            r#"{"gamma1":1,"gamma2":1,"a":1,"b":1,"c":0,"d":0}"#
        )
        .is_err());
    }
}
