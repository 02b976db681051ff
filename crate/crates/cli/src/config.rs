//! Experiment configuration: JSON with `problem`, `solver`, `output` and `seed` blocks,
//! plus optional per-kind blocks.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use hystereact_core::field::{Grid, SpatialConfig};
use hystereact_core::pde::{OvershootPolicy, SolverParams};
use hystereact_core::relay::{Branch, BranchPair, Config};
use hystereact_core::slowfast::{extract_branches, NullclineModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Simulate,
    Slowfast,
    VerifyBranch,
    Sweep,
    Compare,
    KernelCheck,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::Slowfast => "slowfast",
            Kind::VerifyBranch => "verify-branch",
            Kind::Sweep => "sweep",
            Kind::Compare => "compare",
            Kind::KernelCheck => "kernel-check",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown experiment kind '{s}'"))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: Option<Kind>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub verify: Option<VerifySpec>,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    #[serde(default)]
    pub compare: CompareSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default)]
    pub branches: BranchSpec,
    #[serde(default)]
    pub nullcline: Option<NullclineSpec>,
    #[serde(default)]
    pub phi: Option<PhiSpec>,
    #[serde(default)]
    pub xi0: Option<XiSpec>,
    /// Initial front; enables free-boundary tracking for prototype data.
    #[serde(default)]
    pub abar: Option<f64>,
    /// Adds `perturbation * cos(pi x)` to `phi`.
    #[serde(default)]
    pub perturbation: f64,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Right-hand side `f(u, v)` of the slow equation.
    #[serde(default)]
    pub source: SourceSpec,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BranchSpec {
    #[default]
    Cubic,
    Constant {
        alpha: f64,
        beta: f64,
        c1: f64,
        c2: f64,
    },
    Affine {
        alpha: f64,
        beta: f64,
        h1: AffineSpec,
        h2: AffineSpec,
        #[serde(default)]
        sigma: f64,
    },
    /// Tabulated outer branches of `problem.nullcline` (cubic by default).
    Nullcline {
        #[serde(default = "default_u_range")]
        u_range: [f64; 2],
        #[serde(default = "default_resolution")]
        resolution: usize,
    },
}

fn default_u_range() -> [f64; 2] {
    [-2.0, 2.0]
}

fn default_resolution() -> usize {
    400
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NullclineSpec {
    /// `g = u + v - v^3`.
    Cubic {
        #[serde(default = "default_v_range")]
        v_range: [f64; 2],
        #[serde(default = "default_fold_samples")]
        samples: usize,
    },
    /// `g = u_coeff * u + sum_k v_coeffs[k] v^k`.
    Polynomial {
        u_coeff: f64,
        v_coeffs: Vec<f64>,
        #[serde(default = "default_v_range")]
        v_range: [f64; 2],
        #[serde(default = "default_fold_samples")]
        samples: usize,
    },
}

impl Default for NullclineSpec {
    fn default() -> Self {
        NullclineSpec::Cubic {
            v_range: default_v_range(),
            samples: default_fold_samples(),
        }
    }
}

fn default_v_range() -> [f64; 2] {
    [-2.0, 2.0]
}

fn default_fold_samples() -> usize {
    401
}

/// A number or the name of a threshold.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Value(f64),
    Named(String),
}

impl Level {
    fn resolve(&self, field: &str, branches: &BranchPair) -> Result<f64, ConfigError> {
        match self {
            Level::Value(x) => Ok(*x),
            Level::Named(s) if s == "alpha" => Ok(branches.alpha()),
            Level::Named(s) if s == "beta" => Ok(branches.beta()),
            Level::Named(s) => Err(field_err(
                field,
                format!("expected a number, 'alpha' or 'beta', got '{s}'"),
            )),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    /// `intercept + slope (x - at)`.
    Affine {
        slope: f64,
        intercept: Level,
        #[serde(default)]
        at: f64,
    },
    /// `mean + amplitude cos(pi x)`.
    Cosine { amplitude: f64, mean: Level },
    /// Piecewise-linear through `(x, value)` pairs.
    Table(Vec<[f64; 2]>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum XiSpec {
    StepAt(f64),
    Uniform(u8),
    Table(Vec<u8>),
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// `f(u, v) = v`.
    #[default]
    V,
    Constant(f64),
}

impl SourceSpec {
    pub fn eval(&self, _u: f64, v: f64) -> f64 {
        match self {
            SourceSpec::V => v,
            SourceSpec::Constant(c) => *c,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_cells")]
    pub n_cells: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub overshoot_policy: PolicySpec,
    #[serde(default)]
    pub startup_implicit_steps: usize,
}

fn default_cells() -> usize {
    400
}

fn default_dt() -> f64 {
    1e-4
}

fn default_t_end() -> f64 {
    0.05
}

fn default_theta() -> f64 {
    0.5
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            n_cells: default_cells(),
            dt: default_dt(),
            t_end: default_t_end(),
            theta: default_theta(),
            overshoot_policy: PolicySpec::default(),
            startup_implicit_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySpec {
    #[default]
    Halt,
    Subdivide,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_stride")]
    pub save_stride: usize,
}

fn default_stride() -> usize {
    1
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            save_stride: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Perturbation,
    Epsilon,
    Grid,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Perturbation => "perturbation",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Grid => "grid",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchChoice {
    H1,
    H2,
    #[default]
    Both,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default)]
    pub branch: BranchChoice,
    /// Defaults to the exponent carried by the branches.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_u_bound")]
    pub u_bound: f64,
    #[serde(default = "default_verify_samples")]
    pub samples: usize,
}

fn default_u_bound() -> f64 {
    1.0
}

fn default_verify_samples() -> usize {
    32
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            branch: BranchChoice::Both,
            sigma: None,
            u_bound: default_u_bound(),
            samples: default_verify_samples(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// Source positions in `[0, 1]`, snapped to nodes.
    #[serde(default)]
    pub sources: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    #[serde(default)]
    pub burn_in: f64,
    #[serde(default = "default_tube_cells")]
    pub tube_cells: f64,
}

fn default_tube_cells() -> f64 {
    hystereact_core::slowfast::TUBE_CELLS
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            burn_in: 0.0,
            tube_cells: default_tube_cells(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        Ok((Self::parse(&text)?, bytes))
    }

    /// Check ranges and the presence of the blocks `kind` needs.
    pub fn validate(&self, kind: Kind) -> Result<(), ConfigError> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(field_err(
                    "kind",
                    format!("config is for '{k}' but '{kind}' was requested"),
                ));
            }
        }
        let s = &self.solver;
        if s.n_cells == 0 {
            return Err(field_err("solver.n_cells", "must be positive"));
        }
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(field_err(
                "solver.dt",
                format!("must be positive (got {})", s.dt),
            ));
        }
        if !(s.t_end > 0.0 && s.t_end.is_finite()) {
            return Err(field_err(
                "solver.t_end",
                format!("must be positive (got {})", s.t_end),
            ));
        }
        if s.dt > s.t_end {
            return Err(field_err(
                "solver.dt",
                format!("exceeds solver.t_end = {}", s.t_end),
            ));
        }
        if !(0.5..=1.0).contains(&s.theta) {
            return Err(field_err(
                "solver.theta",
                format!("must lie in [0.5, 1] (got {})", s.theta),
            ));
        }
        if self.output.save_stride == 0 {
            return Err(field_err("output.save_stride", "must be positive"));
        }
        let p = &self.problem;
        if let Some(a) = p.abar {
            if !(a > 0.0 && a < 1.0) {
                return Err(field_err(
                    "problem.abar",
                    format!("must lie in (0, 1) (got {a})"),
                ));
            }
        }
        if !p.perturbation.is_finite() {
            return Err(field_err("problem.perturbation", "must be finite"));
        }
        if let Some(XiSpec::StepAt(x)) = &p.xi0 {
            if !(0.0..=1.0).contains(x) {
                return Err(field_err(
                    "problem.xi0.step_at",
                    format!("must lie in [0, 1] (got {x})"),
                ));
            }
        }
        if let Some(XiSpec::Uniform(c)) = &p.xi0 {
            if Config::from_index(*c).is_none() {
                return Err(field_err(
                    "problem.xi0.uniform",
                    format!("must be 1 or 2 (got {c})"),
                ));
            }
        }
        if let Some(XiSpec::Table(t)) = &p.xi0 {
            if t.len() != s.n_cells + 1 {
                return Err(field_err(
                    "problem.xi0.table",
                    format!("needs {} entries (got {})", s.n_cells + 1, t.len()),
                ));
            }
            if let Some(c) = t.iter().find(|&&c| Config::from_index(c).is_none()) {
                return Err(field_err(
                    "problem.xi0.table",
                    format!("entries must be 1 or 2 (got {c})"),
                ));
            }
        }
        if let Some(PhiSpec::Table(t)) = &p.phi {
            if t.len() < 2 {
                return Err(field_err("problem.phi.table", "needs at least two points"));
            }
            if t.iter().any(|q| !(0.0..=1.0).contains(&q[0])) {
                return Err(field_err(
                    "problem.phi.table",
                    "x values must lie in [0, 1]",
                ));
            }
            if t.windows(2).any(|w| !(w[0][0] < w[1][0])) {
                return Err(field_err(
                    "problem.phi.table",
                    "x values must be strictly increasing",
                ));
            }
        }
        if let BranchSpec::Nullcline {
            u_range,
            resolution,
        } = &p.branches
        {
            if !(u_range[0] < u_range[1]) || *resolution == 0 {
                return Err(field_err(
                    "problem.branches",
                    "needs u_range[0] < u_range[1] and resolution > 0",
                ));
            }
        }
        if let Some(e) = p.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(field_err(
                    "problem.epsilon",
                    format!("must be positive (got {e})"),
                ));
            }
        }
        let needs_phi = !matches!(kind, Kind::VerifyBranch | Kind::KernelCheck);
        if needs_phi && p.phi.is_none() {
            return Err(field_err("problem.phi", format!("required for '{kind}'")));
        }
        match kind {
            Kind::Slowfast | Kind::Compare if p.epsilon.is_none() => {
                return Err(field_err(
                    "problem.epsilon",
                    format!("required for '{kind}'"),
                ));
            }
            Kind::Sweep => {
                let sw = self
                    .sweep
                    .as_ref()
                    .ok_or_else(|| field_err("sweep", "required for 'sweep'"))?;
                if sw.values.is_empty() {
                    return Err(field_err("sweep.values", "must not be empty"));
                }
                for &v in &sw.values {
                    let ok = match sw.axis {
                        SweepAxis::Perturbation => v.is_finite(),
                        SweepAxis::Epsilon => v > 0.0 && v.is_finite(),
                        SweepAxis::Grid => v >= 1.0 && v.fract() == 0.0,
                    };
                    if !ok {
                        return Err(field_err(
                            "sweep.values",
                            format!("invalid {} value {v}", sw.axis.as_str()),
                        ));
                    }
                }
                if sw.axis == SweepAxis::Perturbation && p.abar.is_none() {
                    return Err(field_err(
                        "problem.abar",
                        "required for a perturbation sweep",
                    ));
                }
            }
            Kind::KernelCheck => {
                if let Some(k) = &self.kernel {
                    if let Some(t) = &k.times {
                        if t.is_empty() || t.iter().any(|&t| !(t > 0.0 && t <= s.t_end)) {
                            return Err(field_err(
                                "kernel.times",
                                "must be non-empty and lie in (0, t_end]",
                            ));
                        }
                    }
                    if let Some(src) = &k.sources {
                        if src.is_empty() || src.iter().any(|x| !(0.0..=1.0).contains(x)) {
                            return Err(field_err(
                                "kernel.sources",
                                "must be non-empty and lie in [0, 1]",
                            ));
                        }
                    }
                }
            }
            Kind::VerifyBranch => {
                let v = self.verify.clone().unwrap_or_default();
                if let Some(sg) = v.sigma {
                    if !(0.0..1.0).contains(&sg) {
                        return Err(field_err(
                            "verify.sigma",
                            format!("must lie in [0, 1) (got {sg})"),
                        ));
                    }
                }
                if v.samples < 2 {
                    return Err(field_err("verify.samples", "must be at least 2"));
                }
                if !(v.u_bound > 0.0) {
                    return Err(field_err("verify.u_bound", "must be positive"));
                }
            }
            _ => {}
        }
        if !(self.compare.burn_in >= 0.0) || !(self.compare.tube_cells >= 0.0) {
            return Err(field_err(
                "compare",
                "burn_in and tube_cells must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.solver.n_cells).expect("validated")
    }

    pub fn params_on(&self, grid: Grid) -> SolverParams {
        SolverParams::new(grid, self.solver.t_end)
            .with_dt(self.solver.dt)
            .with_theta(self.solver.theta)
            .with_policy(match self.solver.overshoot_policy {
                PolicySpec::Halt => OvershootPolicy::Halt,
                PolicySpec::Subdivide => OvershootPolicy::Subdivide,
            })
            .with_save_stride(self.output.save_stride)
            .with_startup_implicit_steps(self.solver.startup_implicit_steps)
    }

    pub fn model(&self) -> Result<NullclineModel, ConfigError> {
        let spec = self.problem.nullcline.clone().unwrap_or_default();
        let (model, v_range, samples) = match spec {
            NullclineSpec::Cubic { v_range, samples } => {
                (NullclineModel::cubic(), v_range, samples)
            }
            NullclineSpec::Polynomial {
                u_coeff,
                v_coeffs,
                v_range,
                samples,
            } => {
                let dc: Vec<f64> = v_coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, c)| k as f64 * c)
                    .collect();
                let c = v_coeffs.clone();
                let m = NullclineModel::new(move |u, v| u_coeff * u + horner(&c, v))
                    .with_partials(move |_, _| u_coeff, move |_, v| horner(&dc, v));
                (m, v_range, samples)
            }
        };
        model
            .detect((v_range[0], v_range[1]), samples)
            .map_err(|e| field_err("problem.nullcline", e.to_string()))
    }

    pub fn branches(&self) -> Result<BranchPair, ConfigError> {
        let f = "problem.branches";
        match &self.problem.branches {
            BranchSpec::Cubic => Ok(BranchPair::cubic()),
            BranchSpec::Constant {
                alpha,
                beta,
                c1,
                c2,
            } => BranchPair::constant(*alpha, *beta, *c1, *c2)
                .map_err(|e| field_err(f, e.to_string())),
            BranchSpec::Affine {
                alpha,
                beta,
                h1,
                h2,
                sigma,
            } => BranchPair::new(
                *alpha,
                *beta,
                Branch::Affine {
                    slope: h1.slope,
                    intercept: h1.intercept,
                },
                Branch::Affine {
                    slope: h2.slope,
                    intercept: h2.intercept,
                },
                *sigma,
            )
            .map_err(|e| field_err(f, e.to_string())),
            BranchSpec::Nullcline {
                u_range,
                resolution,
            } => {
                let m = self.model()?;
                extract_branches(&m, (u_range[0], u_range[1]), *resolution)
                    .map_err(|e| field_err(f, e.to_string()))
            }
        }
    }

    /// Unperturbed initial profile on `grid`.
    pub fn phi_base(&self, grid: &Grid, branches: &BranchPair) -> Result<Vec<f64>, ConfigError> {
        let spec = self
            .problem
            .phi
            .as_ref()
            .ok_or_else(|| field_err("problem.phi", "missing"))?;
        Ok(match spec {
            PhiSpec::Affine {
                slope,
                intercept,
                at,
            } => {
                let c = intercept.resolve("problem.phi.affine.intercept", branches)?;
                grid.sample(|x| c + slope * (x - at))
            }
            PhiSpec::Cosine { amplitude, mean } => {
                let m = mean.resolve("problem.phi.cosine.mean", branches)?;
                grid.sample(|x| m + amplitude * (std::f64::consts::PI * x).cos())
            }
            PhiSpec::Table(pts) => grid.sample(|x| interpolate(pts, x)),
        })
    }

    /// Initial profile with `perturbation * cos(pi x)` added.
    pub fn phi_with(
        &self,
        grid: &Grid,
        branches: &BranchPair,
        perturbation: f64,
    ) -> Result<Vec<f64>, ConfigError> {
        let mut phi = self.phi_base(grid, branches)?;
        if perturbation != 0.0 {
            for (i, p) in phi.iter_mut().enumerate() {
                *p += perturbation * (std::f64::consts::PI * grid.x(i)).cos();
            }
        }
        Ok(phi)
    }

    pub fn xi0(&self, grid: &Grid) -> SpatialConfig {
        match (&self.problem.xi0, self.problem.abar) {
            (Some(XiSpec::StepAt(a)), _) => SpatialConfig::step_at(grid, *a),
            (Some(XiSpec::Uniform(c)), _) => {
                SpatialConfig::uniform(grid, Config::from_index(*c).expect("validated"))
            }
            (Some(XiSpec::Table(t)), _) => SpatialConfig(
                t.iter()
                    .map(|&c| Config::from_index(c).expect("validated"))
                    .collect(),
            ),
            (None, Some(a)) => SpatialConfig::step_at(grid, a),
            (None, None) => SpatialConfig::uniform(grid, Config::One),
        }
    }
}

fn horner(c: &[f64], v: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * v + k)
}

fn interpolate(pts: &[[f64; 2]], x: f64) -> f64 {
    if x <= pts[0][0] {
        return pts[0][1];
    }
    for w in pts.windows(2) {
        if x <= w[1][0] {
            let s = (x - w[0][0]) / (w[1][0] - w[0][0]);
            return w[0][1] + s * (w[1][1] - w[0][1]);
        }
    }
    pts[pts.len() - 1][1]
}
