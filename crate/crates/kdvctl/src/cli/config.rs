use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discretization::{
    build_grid, build_operators, Grid, NegNormRealizer, NegOrder, OperatorSet,
};
use crate::dynamics::{Channel, ControlWindow, Eps, SystemParams};
use crate::error::{Error, Result};
use crate::hum::{HumConfig, DEFAULT_CG_MAXIT, DEFAULT_CG_TOL, DEFAULT_PENALTY};
use crate::source_term::{DEFAULT_K_MAX, DEFAULT_STOP_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    LinearKsControl,
    LinearEllipticControl,
    NonlinearKs,
    NonlinearElliptic,
    EpsParabolic,
}

impl Model {
    pub fn channel(self) -> Channel {
        match self {
            Model::LinearKsControl | Model::NonlinearKs => Channel::Ks,
            _ => Channel::Elliptic,
        }
    }

    pub fn is_nonlinear(self) -> bool {
        matches!(self, Model::NonlinearKs | Model::NonlinearElliptic)
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::LinearKsControl => "linear-ks-control",
            Model::LinearEllipticControl => "linear-elliptic-control",
            Model::NonlinearKs => "nonlinear-ks",
            Model::NonlinearElliptic => "nonlinear-elliptic",
            Model::EpsParabolic => "eps-parabolic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_interior: usize,
    /// time steps over the horizon
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_interior: 32,
            steps: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub l1: f64,
    pub l2: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { l1: 0.3, l2: 0.7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumSection {
    pub penalty: f64,
    pub cg_tol: f64,
    pub cg_maxit: usize,
}

impl Default for HumSection {
    fn default() -> Self {
        Self {
            penalty: DEFAULT_PENALTY,
            cg_tol: DEFAULT_CG_TOL,
            cg_maxit: DEFAULT_CG_MAXIT,
        }
    }
}

/// Initial field on the grid. `modes` and `random` build Σ cⱼ sin(jπx),
/// multiplied by sin²(πx) for u so the clamped conditions hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Profile {
    Zero {},
    Modes { coefficients: Vec<f64> },
    Random { modes: usize, amplitude: f64 },
    Samples { values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormTarget {
    /// −1 or −2
    pub order: i32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialData {
    pub profile: Profile,
    /// rescale the profile to this negative norm
    #[serde(default)]
    pub normalize: Option<NormTarget>,
}

impl Default for InitialData {
    fn default() -> Self {
        Self {
            profile: Profile::Modes {
                coefficients: vec![0.0, 0.0, 1.0],
            },
            normalize: None,
        }
    }
}

impl InitialData {
    pub fn realize<R: Rng>(
        &self,
        grid: &Grid,
        realizer: &NegNormRealizer,
        clamped: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let envelope = |x: f64| if clamped { (PI * x).sin().powi(2) } else { 1.0 };
        let series = |c: &[f64]| {
            grid.sample(|x| {
                envelope(x)
                    * c.iter()
                        .enumerate()
                        .map(|(j, a)| a * ((j + 1) as f64 * PI * x).sin())
                        .sum::<f64>()
            })
        };
        let mut field = match &self.profile {
            Profile::Zero {} => vec![0.0; grid.n()],
            Profile::Modes { coefficients } => series(coefficients),
            Profile::Random { modes, amplitude } => {
                let c: Vec<f64> = (0..*modes)
                    .map(|_| amplitude * rng.gen_range(-1.0..1.0))
                    .collect();
                series(&c)
            }
            Profile::Samples { values } => {
                if values.len() != grid.n() {
                    return Err(Error::Config(format!(
                        "samples profile has {} values, grid has {} interior nodes",
                        values.len(),
                        grid.n()
                    )));
                }
                values.clone()
            }
        };
        if field.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("initial data must be finite".into()));
        }
        if let Some(t) = self.normalize {
            let order = NegOrder::from_int(t.order).map_err(|e| Error::Config(e.to_string()))?;
            if !(t.value >= 0.0) {
                return Err(Error::Config("normalize.value must be nonnegative".into()));
            }
            let n = realizer.norm(&field, order);
            if n == 0.0 {
                if t.value != 0.0 {
                    return Err(Error::Config("cannot normalize a zero profile".into()));
                }
            } else {
                let s = t.value / n;
                field.iter_mut().for_each(|x| *x *= s);
            }
        }
        Ok(field)
    }
}

/// The cost constant in the source-term weights: a number, or "fit" to
/// take fit_K from a cost sweep run with the `cost_sweep` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KRepr", into = "KRepr")]
pub enum CostConstant {
    Fit,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KRepr {
    Tag(String),
    Value(f64),
}

impl TryFrom<KRepr> for CostConstant {
    type Error = String;
    fn try_from(r: KRepr) -> std::result::Result<Self, String> {
        match r {
            KRepr::Tag(s) if s == "fit" => Ok(CostConstant::Fit),
            KRepr::Tag(s) => Err(format!("k_cost must be a number or \"fit\", got \"{s}\"")),
            KRepr::Value(v) => Ok(CostConstant::Value(v)),
        }
    }
}

impl From<CostConstant> for KRepr {
    fn from(k: CostConstant) -> Self {
        match k {
            CostConstant::Fit => KRepr::Tag("fit".into()),
            CostConstant::Value(v) => KRepr::Value(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTermConfig {
    /// defaults to 1.05·q²/(2−q²)
    pub p: Option<f64>,
    pub q: f64,
    pub k_cost: CostConstant,
    /// used when the fit is requested but unusable
    pub k_fallback: Option<f64>,
    pub k_max: usize,
    pub base_steps: Option<usize>,
    pub stop_tol: f64,
}

impl Default for SourceTermConfig {
    fn default() -> Self {
        Self {
            p: None,
            q: 1.2,
            k_cost: CostConstant::Value(1.0),
            k_fallback: None,
            k_max: DEFAULT_K_MAX,
            base_steps: None,
            stop_tol: DEFAULT_STOP_TOL,
        }
    }
}

impl SourceTermConfig {
    pub fn p(&self) -> f64 {
        self.p
            .unwrap_or(1.05 * self.q * self.q / (2.0 - self.q * self.q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointSection {
    pub radius_r: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub blowup_guard: f64,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        Self {
            radius_r: 1.0,
            tol: crate::fixed_point::DEFAULT_TOL,
            max_iter: crate::fixed_point::DEFAULT_MAX_ITER,
            blowup_guard: crate::dynamics::DEFAULT_BLOWUP_GUARD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSweepConfig {
    pub horizons: Vec<f64>,
    /// defaults to grid.steps / horizon
    pub steps_per_unit_time: Option<f64>,
}

impl Default for CostSweepConfig {
    fn default() -> Self {
        Self {
            horizons: vec![1.0, 0.5, 0.25, 0.125],
            steps_per_unit_time: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsSweepConfig {
    pub ladder: Vec<f64>,
}

impl Default for EpsSweepConfig {
    fn default() -> Self {
        Self {
            ladder: vec![1.0, 0.1, 0.01, 0.001],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub samples: usize,
    pub modes: usize,
    pub k: f64,
    /// inner set ω₀; defaults to the middle half of the window
    pub omega0: Option<(f64, f64)>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            mu: vec![0.25, 1.0, 4.0, 16.0],
            lambda: vec![0.5, 1.0, 2.0],
            samples: 20,
            modes: 6,
            k: crate::carleman_diag::DEFAULT_K,
            omega0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Model,
    pub params: SystemParams,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default = "unit_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub hum: HumSection,
    #[serde(default)]
    pub u0: InitialData,
    #[serde(default)]
    pub v0: Option<InitialData>,
    #[serde(default)]
    pub source_term: SourceTermConfig,
    #[serde(default)]
    pub fixed_point: FixedPointSection,
    #[serde(default)]
    pub cost_sweep: CostSweepConfig,
    #[serde(default)]
    pub eps_sweep: EpsSweepConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn unit_horizon() -> f64 {
    1.0
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    /// Admissibility checks that do not need the operators.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let cfg = |m: String| Err(Error::Config(m));
        if !(p.gamma1 > 0.0) {
            return cfg(format!("params.gamma1 must be positive, got {}", p.gamma1));
        }
        if !(p.gamma2 > 0.0) {
            return cfg(format!("params.gamma2 must be positive, got {}", p.gamma2));
        }
        match self.model.channel() {
            Channel::Ks if p.b == 0.0 => {
                return cfg(format!(
                    "model {} needs b != 0: a control in the fourth-order equation reaches v only through b",
                    self.model.name()
                ))
            }
            Channel::Elliptic if p.a == 0.0 => {
                return cfg(format!(
                    "model {} needs a != 0: a control in the second equation reaches u only through a",
                    self.model.name()
                ))
            }
            _ => {}
        }
        match (self.model, p.eps) {
            (Model::EpsParabolic, Eps::Elliptic) => {
                return cfg("model eps-parabolic needs params.eps in (0,1]".into())
            }
            (Model::EpsParabolic, Eps::Parabolic(e)) if !(e > 0.0 && e <= 1.0) => {
                return cfg(format!("params.eps must lie in (0,1], got {e}"))
            }
            (m, Eps::Parabolic(_)) if m != Model::EpsParabolic => {
                return cfg(format!(
                    "model {} is parabolic-elliptic; drop params.eps",
                    m.name()
                ))
            }
            _ => {}
        }
        match (self.model, &self.v0) {
            (Model::EpsParabolic, None) => return cfg("model eps-parabolic needs v0".into()),
            (m, Some(_)) if m != Model::EpsParabolic => {
                return cfg(format!(
                    "v0 only applies to eps-parabolic, not {}",
                    m.name()
                ))
            }
            _ => {}
        }
        if self.grid.n_interior < crate::discretization::MIN_INTERIOR {
            return cfg(format!(
                "grid.n_interior must be at least 8, got {}",
                self.grid.n_interior
            ));
        }
        if self.grid.steps == 0 {
            return cfg("grid.steps must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return cfg(format!("horizon must be positive, got {}", self.horizon));
        }
        self.hum_config()
            .map_err(to_config)?
            .validate()
            .map_err(to_config)?;
        Ok(())
    }

    pub fn hum_config(&self) -> Result<HumConfig> {
        let window = ControlWindow::new(self.window.l1, self.window.l2, self.model.channel())
            .map_err(to_config)?;
        Ok(HumConfig {
            penalty: self.hum.penalty,
            cg_tol: self.hum.cg_tol,
            cg_maxit: self.hum.cg_maxit,
            window,
        })
    }

    /// Validated operators for the configured grid.
    pub fn operators(&self) -> Result<OperatorSet> {
        let grid = build_grid(self.grid.n_interior).map_err(to_config)?;
        let ops = build_operators(&grid);
        self.params.validate(&ops).map_err(to_config)?;
        Ok(ops)
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
