//! Python bindings: branch pairs, relays, the hysteresis and slow-fast solvers, the
//! verification routines and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hystereact_cli::config::{ExperimentConfig, Kind};
use hystereact_cli::run;
use hystereact_core::field::{Grid, SpatialConfig};
use hystereact_core::pde::{self, OvershootPolicy, SolverParams};
use hystereact_core::relay::{self, Config, CutoffSide, RelayState};
use hystereact_core::slowfast;
use hystereact_core::transverse::{self, TrackGeometry};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config_of(i: u8) -> PyResult<Config> {
    Config::from_index(i)
        .ok_or_else(|| PyValueError::new_err(format!("configuration must be 1 or 2 (got {i})")))
}

/// Pair of hysteresis branches `H1` (below `beta`) and `H2` (above `alpha`).
#[pyclass(module = "hystereact", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct BranchPair {
    inner: relay::BranchPair,
}

#[pymethods]
impl BranchPair {
    /// Branches of the cubic nullcline `u = v^3 - v`.
    #[staticmethod]
    fn cubic() -> Self {
        Self {
            inner: relay::BranchPair::cubic(),
        }
    }

    /// Constant branches `H1 = c1`, `H2 = c2`.
    #[staticmethod]
    fn constant(alpha: f64, beta: f64, c1: f64, c2: f64) -> PyResult<Self> {
        Ok(Self {
            inner: relay::BranchPair::constant(alpha, beta, c1, c2).map_err(value_err)?,
        })
    }

    /// Branches extracted from the cubic nullcline by continuation, tabulated.
    #[staticmethod]
    #[pyo3(signature = (u_min=-2.0, u_max=2.0, resolution=400))]
    fn from_cubic_nullcline(u_min: f64, u_max: f64, resolution: usize) -> PyResult<Self> {
        let model = cubic_model()?;
        Ok(Self {
            inner: slowfast::extract_branches(&model, (u_min, u_max), resolution)
                .map_err(value_err)?,
        })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    fn h1(&self, u: f64) -> PyResult<f64> {
        self.inner.h1(u).map_err(value_err)
    }

    fn h2(&self, u: f64) -> PyResult<f64> {
        self.inner.h2(u).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "BranchPair(alpha={}, beta={}, sigma={})",
            self.inner.alpha(),
            self.inner.beta(),
            self.inner.sigma()
        )
    }
}

/// A single relay fed with a sequence of inputs.
#[pyclass(module = "hystereact")]
pub struct Relay {
    branches: relay::BranchPair,
    state: RelayState,
}

#[pymethods]
impl Relay {
    #[new]
    #[pyo3(signature = (branches, g0, zeta0=1))]
    fn new(branches: &BranchPair, g0: f64, zeta0: u8) -> PyResult<Self> {
        let b = branches.inner.clone();
        let state = RelayState::new(config_of(zeta0)?, g0, &b);
        Ok(Self { branches: b, state })
    }

    /// Feed the next input; returns the configuration (1 or 2).
    fn update(&mut self, g: f64) -> u8 {
        self.state = self.state.update(g, &self.branches);
        self.state.config.index()
    }

    #[getter]
    fn config(&self) -> u8 {
        self.state.config.index()
    }

    /// Output `H_config(g)` of the current configuration.
    fn output(&self, g: f64) -> PyResult<f64> {
        self.state.output(g, &self.branches).map_err(value_err)
    }
}

/// Saved states of a hysteresis run.
#[pyclass(module = "hystereact", frozen, get_all)]
pub struct Trajectory {
    times: Vec<f64>,
    x: Vec<f64>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    configs: Vec<Vec<u8>>,
    status: String,
    switch_count: usize,
    /// `(t, a, b)` of the free-boundary track, when tracked.
    track: Option<Vec<(f64, f64, f64)>>,
}

#[pymethods]
impl Trajectory {
    fn __repr__(&self) -> String {
        format!(
            "Trajectory(status={:?}, saves={}, nodes={}, switches={})",
            self.status,
            self.times.len(),
            self.x.len(),
            self.switch_count
        )
    }
}

impl Trajectory {
    fn from_core(t: &pde::Trajectory) -> Self {
        Self {
            times: t.times(),
            x: t.params.grid.nodes(),
            u: t.snapshots.iter().map(|s| s.u.clone()).collect(),
            v: t.snapshots.iter().map(|s| s.v.clone()).collect(),
            configs: t
                .snapshots
                .iter()
                .map(|s| s.relays.iter().map(|r| r.config.index()).collect())
                .collect(),
            status: t.status.as_str().to_string(),
            switch_count: t.switch_count,
            track: t.track.as_ref().map(|tr| {
                tr.times
                    .iter()
                    .zip(&tr.a_values)
                    .zip(&tr.b_values)
                    .map(|((t, a), b)| (*t, *a, *b))
                    .collect()
            }),
        }
    }
}

fn params(
    n_cells: usize,
    dt: f64,
    t_end: f64,
    theta: f64,
    save_stride: usize,
    subdivide: bool,
) -> PyResult<SolverParams> {
    let p = SolverParams::new(Grid::new(n_cells).map_err(value_err)?, t_end)
        .with_dt(dt)
        .with_theta(theta)
        .with_save_stride(save_stride)
        .with_policy(if subdivide {
            OvershootPolicy::Subdivide
        } else {
            OvershootPolicy::Halt
        });
    p.validate().map_err(value_err)?;
    Ok(p)
}

fn xi_of(xi0: Vec<u8>) -> PyResult<SpatialConfig> {
    Ok(SpatialConfig(
        xi0.into_iter().map(config_of).collect::<PyResult<_>>()?,
    ))
}

/// Solve `u_t = u_xx + v` with relay hysteresis from nodal data `phi`, `xi0`.
/// With `abar`, the free boundary is tracked when the data form a prototype.
#[pyfunction]
#[pyo3(signature = (phi, xi0, branches, dt, t_end, theta=0.5, save_stride=1, subdivide=true, abar=None))]
#[allow(clippy::too_many_arguments)]
fn solve(
    py: Python<'_>,
    phi: Vec<f64>,
    xi0: Vec<u8>,
    branches: &BranchPair,
    dt: f64,
    t_end: f64,
    theta: f64,
    save_stride: usize,
    subdivide: bool,
    abar: Option<f64>,
) -> PyResult<Trajectory> {
    if phi.len() < 2 {
        return Err(PyValueError::new_err("phi needs at least two nodes"));
    }
    let p = params(phi.len() - 1, dt, t_end, theta, save_stride, subdivide)?;
    let xi = xi_of(xi0)?;
    let b = &branches.inner;
    let traj = py
        .detach(|| match abar {
            Some(a) => {
                let g = TrackGeometry::from_prototype(&phi, &xi, a, &p.grid, b)?;
                transverse::solve_tracked(&phi, &xi, b, &p, g)
            }
            None => pde::solve(&phi, &xi, b, &p, &mut []),
        })
        .map_err(value_err)?;
    Ok(Trajectory::from_core(&traj))
}

/// Check the branch regularity condition on `H1` (`which=1`) or `H2` (`which=2`).
#[pyfunction]
#[pyo3(signature = (branches, which, sigma=None, u_bound=1.0, samples=32))]
fn verify_branch_condition<'py>(
    py: Python<'py>,
    branches: &BranchPair,
    which: u8,
    sigma: Option<f64>,
    u_bound: f64,
    samples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let b = &branches.inner;
    let sigma = sigma.unwrap_or(b.sigma());
    let report = match config_of(which)? {
        Config::One => relay::verify_branch_condition(
            |u| b.h1(u),
            b.beta(),
            CutoffSide::UpperCutoffBeta,
            sigma,
            u_bound,
            samples,
        ),
        Config::Two => relay::verify_branch_condition(
            |u| b.h2(u),
            b.alpha(),
            CutoffSide::LowerCutoffAlpha,
            sigma,
            u_bound,
            samples,
        ),
    }
    .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("m_estimate", report.m_estimate)?;
    d.set_item("violated", report.violated)?;
    d.set_item("history", report.history)?;
    d.set_item("max_ratio_location", report.max_ratio_location)?;
    Ok(d)
}

fn cubic_model() -> PyResult<slowfast::NullclineModel> {
    slowfast::NullclineModel::cubic()
        .detect((-2.0, 2.0), 401)
        .map_err(value_err)
}

/// Folds of the cubic nullcline: `alpha`, `beta`, the fold points and their order.
#[pyfunction]
fn cubic_folds<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
    let model = cubic_model()?;
    let f = model
        .folds()
        .ok_or_else(|| PyRuntimeError::new_err("folds not detected"))?;
    let d = PyDict::new(py);
    d.set_item("alpha", f.alpha)?;
    d.set_item("beta", f.beta)?;
    d.set_item("a", f.a)?;
    d.set_item("b", f.b)?;
    d.set_item("order", f.order)?;
    Ok(d)
}

/// Evolve a discrete delta at the `sources` nodes and report `sup |u|` and its
/// `sqrt(t)`-scaled value at `times`.
#[pyfunction]
#[pyo3(signature = (n_cells, dt, t_end, sources, times, theta=0.5))]
fn heat_kernel_bound_check<'py>(
    py: Python<'py>,
    n_cells: usize,
    dt: f64,
    t_end: f64,
    sources: Vec<usize>,
    times: Vec<f64>,
    theta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = params(n_cells, dt, t_end, theta, 1, true)?;
    let r = py
        .detach(|| pde::heat_kernel_bound_check(&p, &sources, &times))
        .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("times", r.times)?;
    d.set_item("sup_values", r.sup_values)?;
    d.set_item("scaled", r.scaled)?;
    d.set_item("bound_constant", r.bound_constant)?;
    d.set_item("bounded", r.bounded)?;
    Ok(d)
}

/// Run an experiment from JSON text, write its outputs into `out_dir` and return
/// the process exit code the command-line tool would use.
#[pyfunction]
#[pyo3(signature = (kind, config, out_dir, jobs=1))]
fn run_experiment(
    py: Python<'_>,
    kind: &str,
    config: &str,
    out_dir: PathBuf,
    jobs: usize,
) -> PyResult<i32> {
    let kind: Kind = kind.parse().map_err(PyValueError::new_err)?;
    let cfg = ExperimentConfig::parse(config).map_err(value_err)?;
    let outcome = py
        .detach(|| run::execute(kind, &cfg, jobs))
        .map_err(value_err)?;
    run::write_outputs(&out_dir, kind, &cfg, config.as_bytes(), &outcome).map_err(value_err)?;
    Ok(run::exit_code(outcome.status))
}

#[pymodule]
fn hystereact(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", hystereact_core::VERSION)?;
    m.add("CUBIC_FOLD_U", relay::CUBIC_FOLD_U)?;
    m.add_class::<BranchPair>()?;
    m.add_class::<Relay>()?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(verify_branch_condition, m)?)?;
    m.add_function(wrap_pyfunction!(cubic_folds, m)?)?;
    m.add_function(wrap_pyfunction!(heat_kernel_bound_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
