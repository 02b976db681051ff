//! IMEX finite differences for `u_t = u_xx + v` with `u_x = 0` at both ends.
//!
//! Diffusion is theta-weighted implicit (Crank–Nicolson at `theta = 1/2`, backward
//! Euler at `theta = 1`); the hysteresis source is frozen at its value from the start
//! of the step. The Neumann condition uses mirror ghost nodes, which gives the boundary
//! rows `2 (u_1 - u_0) / h^2` and `2 (u_{N-1} - u_N) / h^2`.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{advance_field, init_field, FieldState, Grid, SpatialConfig};
use crate::relay::{BranchPair, Config};
use crate::transverse::FreeBoundaryTrack;

/// Smallest step the solver will subdivide down to.
pub const DT_MIN: f64 = 1e-10;

/// Upper bound on switch-sharpening sub-steps inside one step.
const MAX_SUBSTEPS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OvershootPolicy {
    /// Take steps as they come; a domain violation ends the run.
    Halt,
    /// Shorten steps so relays flip on step boundaries, and halve steps that produce a
    /// domain violation down to [`DT_MIN`].
    Subdivide,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverParams {
    pub grid: Grid,
    pub dt: f64,
    pub t_end: f64,
    pub theta: f64,
    pub overshoot_policy: OvershootPolicy,
    /// Keep every `save_stride`-th step (the initial and final states are always kept).
    pub save_stride: usize,
    /// Number of initial steps taken with backward Euler to damp rough initial data.
    pub startup_implicit_steps: usize,
}

impl SolverParams {
    /// `N = 400`, `dt = 1e-4`, Crank–Nicolson.
    pub fn new(grid: Grid, t_end: f64) -> Self {
        Self {
            grid,
            dt: 1e-4,
            t_end,
            theta: 0.5,
            overshoot_policy: OvershootPolicy::Halt,
            save_stride: 1,
            startup_implicit_steps: 0,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_policy(mut self, policy: OvershootPolicy) -> Self {
        self.overshoot_policy = policy;
        self
    }

    pub fn with_save_stride(mut self, stride: usize) -> Self {
        self.save_stride = stride;
        self
    }

    pub fn with_startup_implicit_steps(mut self, n: usize) -> Self {
        self.startup_implicit_steps = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive (got {})",
                self.dt
            )));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "t_end must be non-negative (got {})",
                self.t_end
            )));
        }
        if self.t_end > 0.0 && self.dt > self.t_end {
            return Err(Error::InvalidParameter(format!(
                "dt = {} exceeds t_end = {}",
                self.dt, self.t_end
            )));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!(
                "theta must lie in [1/2, 1] (got {})",
                self.theta
            )));
        }
        if self.save_stride == 0 {
            return Err(Error::InvalidParameter("save_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of steps to reach `t_end`; the last one may be shorter than `dt`.
    pub fn n_steps(&self) -> usize {
        if self.t_end <= 0.0 {
            return 0;
        }
        (self.t_end / self.dt - 1e-9).ceil().max(1.0) as usize
    }

    /// Time after `k` steps.
    pub fn time_of(&self, k: usize) -> f64 {
        if k >= self.n_steps() {
            self.t_end
        } else {
            k as f64 * self.dt
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunStatus {
    Completed,
    TransversalityLost,
    DomainViolation,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::TransversalityLost => "transversality_lost",
            RunStatus::DomainViolation => "domain_violation",
        }
    }
}

/// Saved states of one run.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub params: SolverParams,
    pub snapshots: Vec<FieldState>,
    pub status: RunStatus,
    /// Total number of relay configuration changes over the run.
    pub switch_count: usize,
    pub wall_time: f64,
    pub track: Option<FreeBoundaryTrack>,
}

impl Trajectory {
    pub fn last(&self) -> &FieldState {
        self.snapshots
            .last()
            .expect("trajectory holds the initial state")
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    /// Rows `t, x, u, v, config` for every saved state.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        let grid = self.params.grid;
        writeln!(out, "t,x,u,v,config")?;
        for s in &self.snapshots {
            for i in 0..s.len() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    s.t,
                    grid.x(i),
                    s.u[i],
                    s.v[i],
                    s.relays[i].config.index()
                )?;
            }
        }
        Ok(())
    }
}

/// What a monitor tells the solver after looking at a state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Continue,
    Stop(RunStatus),
}

/// Observer called on the initial state and after every step.
pub trait Monitor {
    fn observe(&mut self, grid: &Grid, state: &FieldState) -> Signal;
}

/// Discrete Neumann Laplacian.
pub fn laplacian(u: &[f64], h: f64) -> Vec<f64> {
    let n = u.len();
    let k = 1.0 / (h * h);
    if n == 1 {
        return vec![0.0];
    }
    let mut out = vec![0.0; n];
    out[0] = 2.0 * (u[1] - u[0]) * k;
    out[n - 1] = 2.0 * (u[n - 2] - u[n - 1]) * k;
    for i in 1..n - 1 {
        out[i] = (u[i - 1] - 2.0 * u[i] + u[i + 1]) * k;
    }
    out
}

/// Thomas algorithm for a tridiagonal system. `sub[0]` and `sup[n-1]` are ignored.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 || sub.len() != n || sup.len() != n || rhs.len() != n {
        return Err(Error::LinearSolveFailure);
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(Error::LinearSolveFailure);
    }
    c[0] = sup[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - sub[i] * c[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::LinearSolveFailure);
        }
        c[i] = sup[i] / pivot;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// One theta step of `u_t = u_xx + source` with the source held fixed.
///
/// Solves `(I - theta dt L) u_new = (I + (1 - theta) dt L) u + dt source`.
pub fn diffusion_step(u: &[f64], source: &[f64], dt: f64, theta: f64, h: f64) -> Result<Vec<f64>> {
    let n = u.len();
    if n == 1 {
        return Ok(vec![u[0] + dt * source[0]]);
    }
    let lu = laplacian(u, h);
    let rhs: Vec<f64> = (0..n)
        .map(|i| u[i] + (1.0 - theta) * dt * lu[i] + dt * source[i])
        .collect();
    let r = theta * dt / (h * h);
    let mut sub = vec![-r; n];
    let diag = vec![1.0 + 2.0 * r; n];
    let mut sup = vec![-r; n];
    sup[0] = -2.0 * r;
    sub[n - 1] = -2.0 * r;
    sub[0] = 0.0;
    sup[n - 1] = 0.0;
    solve_tridiagonal(&sub, &diag, &sup, &rhs)
}

pub(crate) fn theta_for_step(params: &SolverParams, k: usize) -> f64 {
    if k < params.startup_implicit_steps {
        1.0
    } else {
        params.theta
    }
}

/// Advance by one step of length `params.dt`.
pub fn step(
    state: &FieldState,
    params: &SolverParams,
    branches: &BranchPair,
) -> Result<FieldState> {
    step_by(state, params.dt, params.theta, params, branches)
}

fn step_by(
    state: &FieldState,
    dt: f64,
    theta: f64,
    params: &SolverParams,
    branches: &BranchPair,
) -> Result<FieldState> {
    let h = params.grid.h();
    match params.overshoot_policy {
        OvershootPolicy::Halt => {
            let u_new = diffusion_step(&state.u, &state.v, dt, theta, h)?;
            advance_field(state, &u_new, state.t + dt, branches)
        }
        OvershootPolicy::Subdivide => match sharpened_step(state, dt, theta, h, branches) {
            Err(Error::DomainViolation { .. }) if dt / 2.0 >= DT_MIN => {
                let mid = step_by(state, dt / 2.0, theta, params, branches)?;
                step_by(&mid, dt / 2.0, theta, params, branches)
            }
            other => other,
        },
    }
}

/// Step that stops early at the first relay switch so that `v` changes on step boundaries.
fn sharpened_step(
    state: &FieldState,
    dt: f64,
    theta: f64,
    h: f64,
    branches: &BranchPair,
) -> Result<FieldState> {
    let t_target = state.t + dt;
    let mut cur = state.clone();
    for _ in 0..MAX_SUBSTEPS {
        let remaining = t_target - cur.t;
        let u_new = diffusion_step(&cur.u, &cur.v, remaining, theta, h)?;
        let first = cur
            .relays
            .iter()
            .zip(&u_new)
            .filter_map(|(r, &g)| r.pending_switch(g, branches))
            .map(|e| e.fraction)
            .fold(f64::INFINITY, f64::min);
        let sub = first * remaining;
        if first < 1.0 - 1e-9 && sub >= DT_MIN {
            let u_sub = diffusion_step(&cur.u, &cur.v, sub, theta, h)?;
            cur = advance_field(&cur, &u_sub, cur.t + sub, branches)?;
        } else {
            return advance_field(&cur, &u_new, t_target, branches);
        }
    }
    let u_new = diffusion_step(&cur.u, &cur.v, t_target - cur.t, theta, h)?;
    advance_field(&cur, &u_new, t_target, branches)
}

fn count_switches(a: &FieldState, b: &FieldState) -> usize {
    a.relays
        .iter()
        .zip(&b.relays)
        .filter(|(x, y)| x.config != y.config)
        .count()
}

/// Integrate from `phi` to `params.t_end`, consulting the monitors after every step.
pub fn solve(
    phi: &[f64],
    xi0: &SpatialConfig,
    branches: &BranchPair,
    params: &SolverParams,
    monitors: &mut [&mut dyn Monitor],
) -> Result<Trajectory> {
    params.validate()?;
    if phi.len() != params.grid.n_nodes() {
        return Err(Error::InvalidParameter(format!(
            "initial data has {} nodes, grid has {}",
            phi.len(),
            params.grid.n_nodes()
        )));
    }
    let started = Instant::now();
    let grid = params.grid;
    let mut state = init_field(phi, xi0, branches)?;
    let mut snapshots = vec![state.clone()];
    let mut status = RunStatus::Completed;
    let mut switch_count = 0;

    for m in monitors.iter_mut() {
        if let Signal::Stop(s) = m.observe(&grid, &state) {
            status = s;
        }
    }

    let n_steps = params.n_steps();
    let mut k = 0;
    while status == RunStatus::Completed && k < n_steps {
        let dt = params.time_of(k + 1) - params.time_of(k);
        let next = match step_by(&state, dt, theta_for_step(params, k), params, branches) {
            Ok(mut s) => {
                // pin the clock to the step grid so repeated runs share save times
                s.t = params.time_of(k + 1);
                s
            }
            Err(Error::DomainViolation { .. } | Error::EvaluationOutsideDomain(_)) => {
                status = RunStatus::DomainViolation;
                break;
            }
            Err(e) => return Err(e),
        };
        switch_count += count_switches(&state, &next);
        state = next;
        k += 1;
        for m in monitors.iter_mut() {
            if let Signal::Stop(s) = m.observe(&grid, &state) {
                status = s;
            }
        }
        if k % params.save_stride == 0 || k == n_steps || status != RunStatus::Completed {
            snapshots.push(state.clone());
        }
    }

    Ok(Trajectory {
        params: *params,
        snapshots,
        status,
        switch_count,
        wall_time: started.elapsed().as_secs_f64(),
        track: None,
    })
}

/// Result of [`heat_kernel_bound_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct KernelReport {
    pub times: Vec<f64>,
    /// `sup_x |u(x, t)|` for the discrete delta.
    pub sup_values: Vec<f64>,
    /// `sup_values[i] * sqrt(times[i])`.
    pub scaled: Vec<f64>,
    /// Largest scaled value: the fitted constant in `|G| <= k / sqrt(t)`.
    pub bound_constant: f64,
    /// No increasing trend of the scaled values over the sampled times.
    pub bounded: bool,
}

/// Relative least-squares slope of `scaled` against `ln t` below which the scaled sup
/// counts as trend-free.
const KERNEL_TREND_TOL: f64 = 0.01;

/// Evolve a discrete delta (mass `1/h` at each source node) with no source term and
/// record `sup_x |u|` at the requested times.
pub fn heat_kernel_bound_check(
    params: &SolverParams,
    sources: &[usize],
    times: &[f64],
) -> Result<KernelReport> {
    params.validate()?;
    let grid = params.grid;
    if sources.is_empty() || sources.iter().any(|&i| i >= grid.n_nodes()) {
        return Err(Error::InvalidParameter(
            "source node outside the grid".into(),
        ));
    }
    if times.is_empty() || times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidParameter(
            "sample times must be positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let h = grid.h();
    let mut u = vec![0.0; grid.n_nodes()];
    for &i in sources {
        u[i] += 1.0 / h;
    }
    let zero = vec![0.0; grid.n_nodes()];
    let mut k = 0usize;
    let mut sup_values = vec![0.0; times.len()];
    for &j in &order {
        let target = times[j];
        while ((k + 1) as f64) * params.dt <= target * (1.0 + 1e-12) {
            u = diffusion_step(&u, &zero, params.dt, theta_for_step(params, k), h)?;
            k += 1;
        }
        let rest = target - k as f64 * params.dt;
        let at = if rest > 1e-12 * target {
            diffusion_step(&u, &zero, rest, theta_for_step(params, k), h)?
        } else {
            u.clone()
        };
        sup_values[j] = at.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    }
    let scaled: Vec<f64> = sup_values
        .iter()
        .zip(times)
        .map(|(s, t)| s * t.sqrt())
        .collect();
    let bound_constant = scaled.iter().copied().fold(0.0, f64::max);
    let bounded = trend_slope(times, &scaled) <= KERNEL_TREND_TOL;
    Ok(KernelReport {
        times: times.to_vec(),
        sup_values,
        scaled,
        bound_constant,
        bounded,
    })
}

/// Least-squares slope of `y` against `ln t`, relative to the mean of `y`.
fn trend_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    if t.len() < 2 {
        return 0.0;
    }
    let lx: Vec<f64> = t.iter().map(|t| t.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 || my == 0.0 {
        return 0.0;
    }
    let sxy: f64 = lx.iter().zip(y).map(|(x, y)| (x - mx) * (y - my)).sum();
    sxy / sxx / my
}

/// Sup-norm distance between two runs over their common save times, comparing the
/// coarse nodes with the coincident nodes of the fine grid.
pub fn sup_difference(coarse: &Trajectory, fine: &Trajectory) -> Result<f64> {
    let nc = coarse.params.grid.n_cells();
    let nf = fine.params.grid.n_cells();
    if !nf.is_multiple_of(nc) {
        return Err(Error::GridMismatch);
    }
    let ratio = nf / nc;
    let mut sup: f64 = 0.0;
    let mut compared = 0;
    let mut k = 0;
    for s in &coarse.snapshots {
        while k < fine.snapshots.len() && fine.snapshots[k].t < s.t {
            k += 1;
        }
        if k >= fine.snapshots.len() {
            break;
        }
        let f = &fine.snapshots[k];
        if f.t != s.t {
            continue;
        }
        compared += 1;
        for (i, &u) in s.u.iter().enumerate() {
            sup = sup.max((u - f.u[i * ratio]).abs());
        }
    }
    if compared == 0 {
        return Err(Error::WindowEmpty);
    }
    Ok(sup)
}

/// Spatial configuration counts, handy for summaries.
pub fn count_config(state: &FieldState, c: Config) -> usize {
    state.relays.iter().filter(|r| r.config == c).count()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn trapezoid_sum(u: &[f64]) -> f64 {
        let n = u.len() - 1;
        u[1..n].iter().sum::<f64>() + 0.5 * (u[0] + u[n])
    }

    proptest! {
        #[test]
        fn diffusion_conserves_mass(
            u in prop::collection::vec(-1.0f64..1.0, 3..60),
            dt in 1e-5f64..1e-1,
            theta in 0.5f64..=1.0,
        ) {
            let h = 1.0 / (u.len() - 1) as f64;
            let zero = vec![0.0; u.len()];
            let next = diffusion_step(&u, &zero, dt, theta, h).unwrap();
            prop_assert!((trapezoid_sum(&next) - trapezoid_sum(&u)).abs() < 1e-10);
        }

        #[test]
        fn backward_euler_obeys_maximum_principle(
            u in prop::collection::vec(-1.0f64..1.0, 3..60),
            dt in 1e-5f64..1e-1,
        ) {
            let h = 1.0 / (u.len() - 1) as f64;
            let zero = vec![0.0; u.len()];
            let next = diffusion_step(&u, &zero, dt, 1.0, h).unwrap();
            let (lo, hi) = u.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(next.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        }
    }
}
