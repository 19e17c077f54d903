//! Carleman weights and functionals, evaluated on discrete adjoint
//! trajectories as a diagnostic. Nothing here certifies an inequality; the
//! audit only reports ratios.

use rand::Rng;
use serde::Serialize;

use crate::discretization::{Grid, OperatorSet};
use crate::dynamics::{Channel, ControlWindow, Eps, Stepper, SystemParams, TimeMesh, Trajectory};
use crate::error::{Error, Result};

pub const DEFAULT_K: f64 = 2.0;
const NU_SAMPLES: usize = 10_000;
const BETA_SEARCH: (f64, f64, usize) = (-20.0, 20.0, 801);

/// ν = ν₀∘ψ with ν₀(y) = y(1−y) and ψ an increasing cubic bijection of [0,1]
/// sending the midpoint of ω₀ to 1/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NuFunction {
    pub omega0: (f64, f64),
    pub critical_point: f64,
    /// min |ν′| sampled on [0,1] outside ω₀
    pub c_hat: f64,
    kappa: f64,
    beta: f64,
}

impl NuFunction {
    fn warp(&self, x: f64) -> f64 {
        x + x * (1.0 - x) * (self.kappa + self.beta * (x - self.critical_point))
    }

    fn warp_prime(&self, x: f64) -> f64 {
        warp_prime(self.kappa, self.beta, self.critical_point, x)
    }

    pub fn value(&self, x: f64) -> f64 {
        let y = self.warp(x);
        y * (1.0 - y)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        (1.0 - 2.0 * self.warp(x)) * self.warp_prime(x)
    }

    /// ‖ν‖∞, attained at the critical point.
    pub fn sup(&self) -> f64 {
        0.25
    }
}

fn warp_prime(kappa: f64, beta: f64, xc: f64, x: f64) -> f64 {
    1.0 + (1.0 - 2.0 * x) * (kappa + beta * (x - xc)) + x * (1.0 - x) * beta
}

fn min_warp_prime(kappa: f64, beta: f64, xc: f64) -> f64 {
    (0..=NU_SAMPLES)
        .map(|i| warp_prime(kappa, beta, xc, i as f64 / NU_SAMPLES as f64))
        .fold(f64::INFINITY, f64::min)
}

/// Admissible ν for an inner window ω₀. The cubic warp family only stays
/// increasing for centres at least about 1/6 away from either wall; closer
/// windows are refused.
pub fn build_nu(omega0: (f64, f64)) -> Result<NuFunction> {
    let (l1, l2) = omega0;
    if !(l1 > 0.0 && l2 < 1.0 && l1 < l2) {
        return Err(Error::InvalidInput(format!(
            "omega0 = ({l1}, {l2}) must lie strictly inside (0,1)"
        )));
    }
    let xc = 0.5 * (l1 + l2);
    let kappa = (0.5 - xc) / (xc * (1.0 - xc));
    let (lo, hi, count) = BETA_SEARCH;
    let mut best = (0.0, min_warp_prime(kappa, 0.0, xc));
    for i in 0..count {
        let beta = lo + (hi - lo) * i as f64 / (count - 1) as f64;
        let m = min_warp_prime(kappa, beta, xc);
        if m > best.1 {
            best = (beta, m);
        }
    }
    if best.1 <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "no increasing cubic warp centres omega0 = ({l1}, {l2}); move it towards 1/2"
        )));
    }
    let mut nu = NuFunction {
        omega0,
        critical_point: xc,
        c_hat: 0.0,
        kappa,
        beta: best.0,
    };
    let outside = (0..=NU_SAMPLES)
        .map(|i| i as f64 / NU_SAMPLES as f64)
        .filter(|&x| x <= l1 || x >= l2);
    nu.c_hat = outside
        .chain([l1, l2])
        .map(|x| nu.derivative(x).abs())
        .fold(f64::INFINITY, f64::min);
    Ok(nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarlemanWeights {
    pub nu: NuFunction,
    pub s: f64,
    pub lambda: f64,
    pub k: f64,
    pub t_final: f64,
}

/// s = μ(T + T²).
pub fn s_floor(mu: f64, t_final: f64) -> f64 {
    mu * (t_final + t_final * t_final)
}

pub fn build_weights(
    nu: NuFunction,
    s: f64,
    lambda: f64,
    k: f64,
    t_final: f64,
) -> Result<CarlemanWeights> {
    if !(k > 1.0) {
        return Err(Error::InvalidInput(format!("k = {k} must exceed 1")));
    }
    if !(lambda > 0.0 && s > 0.0 && t_final > 0.0) {
        return Err(Error::InvalidInput(
            "s, lambda and T must be positive".into(),
        ));
    }
    Ok(CarlemanWeights {
        nu,
        s,
        lambda,
        k,
        t_final,
    })
}

impl CarlemanWeights {
    fn bump(&self, t: f64) -> f64 {
        t * (self.t_final - t)
    }

    fn exponent(&self, x: f64) -> f64 {
        self.lambda * (self.k * self.nu.sup() + self.nu.value(x))
    }

    pub fn phi(&self, t: f64, x: f64) -> f64 {
        let e = self.exponent(x);
        // e^{2λk‖ν‖} − e^{e} = e^{e}(e^{λ(k‖ν‖−ν)} − 1), kept accurate for small λ
        let gap = self.lambda * (self.k * self.nu.sup() - self.nu.value(x));
        e.exp() * gap.exp_m1() / self.bump(t)
    }

    pub fn xi(&self, t: f64, x: f64) -> f64 {
        self.log_xi(t, x).exp()
    }

    pub fn log_xi(&self, t: f64, x: f64) -> f64 {
        self.exponent(x) - self.bump(t).ln()
    }

    /// ln(e^{−2sφ} ξˡ)
    pub fn log_weight(&self, t: f64, x: f64, l: f64) -> f64 {
        -2.0 * self.s * self.phi(t, x) + l * self.log_xi(t, x)
    }

    pub fn weight(&self, t: f64, x: f64, l: f64) -> f64 {
        self.log_weight(t, x, l).exp()
    }

    pub fn with_s(mut self, s: f64) -> Self {
        self.s = s;
        self
    }
}

/// Smallest C with |(e^{−2sφ}ξˡ)_t| ≤ C s e^{−2sφ} ξ^{l+2} on an interior
/// sample of Q_T. The time derivative is a centred difference of the log
/// weight, so the ratio never forms 0/0.
pub fn time_derivative_bound(w: &CarlemanWeights, l: f64, nt: usize, nx: usize) -> f64 {
    let t_final = w.t_final;
    let delta = 1e-6 * t_final / nt as f64;
    let mut c = 0.0f64;
    for i in 1..nt {
        let t = t_final * i as f64 / nt as f64;
        for j in 0..=nx {
            let x = j as f64 / nx as f64;
            let slope =
                (w.log_weight(t + delta, x, l) - w.log_weight(t - delta, x, l)) / (2.0 * delta);
            let xi = w.xi(t, x);
            c = c.max(slope.abs() / (w.s * xi * xi));
        }
    }
    c
}

/// Which weighted inequality an adjoint trajectory is audited against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inequality {
    /// I_KS + I_E against s¹⁵λ¹⁶∫_ω ξ¹⁵|σ|²
    KsObservation,
    /// I_KS + I_E against s¹¹λ¹²∫_ω ξ¹¹|ψ|²
    EllipticObservation,
    /// I_KS + I_H(ε) against s¹¹λ¹²∫_ω ξ¹¹|ψ|²
    RelaxedObservation,
}

impl Inequality {
    pub fn for_system(params: &SystemParams, channel: Channel) -> Result<Self> {
        match (params.eps, channel) {
            (Eps::Elliptic, Channel::Ks) => Ok(Self::KsObservation),
            (Eps::Elliptic, Channel::Elliptic) => Ok(Self::EllipticObservation),
            (Eps::Parabolic(_), Channel::Elliptic) => Ok(Self::RelaxedObservation),
            (Eps::Parabolic(_), Channel::Ks) => Err(Error::InvalidInput(
                "the relaxed system is only audited with the control in the second equation".into(),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::KsObservation => "ks-observation",
            Self::EllipticObservation => "elliptic-observation",
            Self::RelaxedObservation => "relaxed-observation",
        }
    }

    /// (power of s, power of λ, power of ξ) on the right side
    fn rhs_powers(self) -> (i32, i32, f64) {
        match self {
            Self::KsObservation => (15, 16, 15.0),
            _ => (11, 12, 11.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarlemanAudit {
    pub inequality: Inequality,
    pub s: f64,
    pub lambda: f64,
    /// every integral below is stored divided by e^{log_scale}
    pub log_scale: f64,
    pub i_ks: f64,
    /// I_E, or I_H(ε) for the relaxed system
    pub i_second: f64,
    pub rhs: f64,
    /// rhs / (I_KS + second); None for a zero trajectory
    pub ratio: Option<f64>,
}

impl CarlemanAudit {
    pub fn lhs(&self) -> f64 {
        self.i_ks + self.i_second
    }
}

/// Evaluates the weighted functionals on an adjoint trajectory (σ in `u`,
/// ψ in `v`) by trapezoidal quadrature; the end slices carry no weight.
pub fn eval_functionals(
    traj: &Trajectory,
    w: &CarlemanWeights,
    ops: &OperatorSet,
    window: &ControlWindow,
    inequality: Inequality,
    eps: f64,
) -> Result<CarlemanAudit> {
    let grid = &ops.grid;
    let nodes = traj.times.len();
    if nodes < 3 {
        return Err(Error::InvalidInput(
            "the audit needs at least two time steps".into(),
        ));
    }
    let (s, lam) = (w.s, w.lambda);
    let relaxed = inequality == Inequality::RelaxedObservation;
    let mask = window.mask(grid);
    let (ps, pl, pxi) = inequality.rhs_powers();
    let rhs_scale = s.powi(ps) * lam.powi(pl);
    // largest −2sφ on the sample, factored out so strong weights do not underflow
    let log_scale = (1..nodes - 1)
        .flat_map(|k| {
            grid.nodes()
                .iter()
                .map(move |&x| -2.0 * s * w.phi(traj.times[k], x))
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let mut i_ks = 0.0;
    let mut i_second = 0.0;
    let mut rhs = 0.0;
    for k in 1..nodes - 1 {
        let t = traj.times[k];
        let dt_w = 0.5 * (traj.times[k + 1] - traj.times[k - 1]);
        let span = traj.times[k + 1] - traj.times[k - 1];
        let sig = &traj.u[k];
        let psi = &traj.v[k];
        let s1 = ops.d1.apply(sig);
        let s2 = ops.d2.apply(sig);
        let s3 = ops.d3.apply(sig);
        let s4 = ops.d4.apply(sig);
        let p1 = ops.d1.apply(psi);
        let p2 = ops.d2.apply(psi);
        let mut slice_ks = 0.0;
        let mut slice_second = 0.0;
        let mut slice_rhs = 0.0;
        for (i, &x) in grid.nodes().iter().enumerate() {
            let weight = |l: f64| (w.log_weight(t, x, l) - log_scale).exp();
            let sig_t = (traj.u[k + 1][i] - traj.u[k - 1][i]) / span;
            slice_ks += s.powi(7) * lam.powi(8) * weight(7.0) * sig[i] * sig[i]
                + s.powi(5) * lam.powi(6) * weight(5.0) * s1[i] * s1[i]
                + s.powi(3) * lam.powi(4) * weight(3.0) * s2[i] * s2[i]
                + s * lam * lam * weight(1.0) * s3[i] * s3[i]
                + weight(-1.0) / s * (sig_t * sig_t + s4[i] * s4[i]);
            slice_second += s.powi(3) * lam.powi(4) * weight(3.0) * psi[i] * psi[i]
                + s * lam * lam * weight(1.0) * p1[i] * p1[i]
                + weight(-1.0) / s * p2[i] * p2[i];
            if relaxed {
                let psi_t = (traj.v[k + 1][i] - traj.v[k - 1][i]) / span;
                slice_second += eps * eps * weight(-1.0) / s * psi_t * psi_t;
            }
            if mask[i] != 0.0 {
                let obs = match inequality {
                    Inequality::KsObservation => sig[i],
                    _ => psi[i],
                };
                slice_rhs += rhs_scale * weight(pxi) * obs * obs;
            }
        }
        let h = grid.h();
        i_ks += dt_w * h * slice_ks;
        i_second += dt_w * h * slice_second;
        rhs += dt_w * h * slice_rhs;
    }
    if !(i_ks.is_finite() && i_second.is_finite() && rhs.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite functional at s = {s:e}, lambda = {lam}; reduce s or lambda"
        )));
    }
    let lhs = i_ks + i_second;
    let ratio = if lhs > 0.0 { Some(rhs / lhs) } else { None };
    Ok(CarlemanAudit {
        inequality,
        s,
        lambda: lam,
        log_scale,
        i_ks,
        i_second,
        rhs,
        ratio,
    })
}

/// ω₀ used by default: the middle half of the observation window.
pub fn inner_window(window: &ControlWindow) -> (f64, f64) {
    let quarter = 0.25 * (window.l2 - window.l1);
    (window.l1 + quarter, window.l2 - quarter)
}

/// Random clamped terminal data: a few sine modes times sin²(πx).
pub fn random_terminal_data<R: Rng>(grid: &Grid, rng: &mut R, modes: usize) -> Vec<f64> {
    let coef: Vec<f64> = (0..modes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    grid.sample(|x| {
        let envelope = (std::f64::consts::PI * x).sin().powi(2);
        envelope
            * coef
                .iter()
                .enumerate()
                .map(|(j, c)| c * ((j + 1) as f64 * std::f64::consts::PI * x).sin())
                .sum::<f64>()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub mu: f64,
    pub lambda: f64,
    pub s: f64,
    pub inequality: Inequality,
    pub min_ratio: f64,
    pub median_ratio: f64,
    /// samples with a nonzero left side
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct AuditSetup<'a> {
    pub ops: &'a OperatorSet,
    pub params: SystemParams,
    pub window: ControlWindow,
    pub t_final: f64,
    pub steps: usize,
    pub k: f64,
    pub omega0: Option<(f64, f64)>,
}

/// Sweeps (μ, λ) over adjoint trajectories started from each terminal datum.
/// For the relaxed system the same data serve as σ_T and ψ_T.
pub fn carleman_audit(
    setup: &AuditSetup<'_>,
    grid_points: &[(f64, f64)],
    data: &[Vec<f64>],
) -> Result<Vec<AuditRow>> {
    let inequality = Inequality::for_system(&setup.params, setup.window.target)?;
    let nu = build_nu(setup.omega0.unwrap_or_else(|| inner_window(&setup.window)))?;
    let eps = match setup.params.eps {
        Eps::Elliptic => 0.0,
        Eps::Parabolic(e) => e,
    };
    let mesh = TimeMesh::uniform(setup.t_final, setup.steps)?;
    let mut stepper = Stepper::new(setup.ops, setup.params)?;
    let mut trajectories = Vec::with_capacity(data.len());
    for d in data {
        let psi_t = if eps > 0.0 { Some(d.as_slice()) } else { None };
        trajectories.push(stepper.adjoint(&mesh, d, psi_t, None, None)?);
    }
    let mut rows = Vec::with_capacity(grid_points.len());
    for &(mu, lambda) in grid_points {
        let w = build_weights(
            nu,
            s_floor(mu, setup.t_final),
            lambda,
            setup.k,
            setup.t_final,
        )?;
        let mut ratios = Vec::new();
        for traj in &trajectories {
            if let Some(r) =
                eval_functionals(traj, &w, setup.ops, &setup.window, inequality, eps)?.ratio
            {
                ratios.push(r);
            }
        }
        ratios.sort_by(f64::total_cmp);
        let (min_ratio, median_ratio) = if ratios.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = ratios.len();
            let median = if m % 2 == 1 {
                ratios[m / 2]
            } else {
                0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
            };
            (ratios[0], median)
        };
        rows.push(AuditRow {
            mu,
            lambda,
            s: w.s,
            inequality,
            min_ratio,
            median_ratio,
            samples: ratios.len(),
        });
    }
    Ok(rows)
}

/// First row, in the given order, whose every sampled ratio exceeds 1.
pub fn audit_floor(rows: &[AuditRow]) -> Option<&AuditRow> {
    rows.iter().find(|r| r.min_ratio > 1.0)
}
