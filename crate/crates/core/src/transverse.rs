//! Transversality checks and tracking of the hysteresis free boundary.
//!
//! For prototype data (configuration 1 on `[0, abar]`, 2 on `(abar, 1]`, `phi(abar) = alpha`
//! with positive slope) the configuration-1 region stays an interval `[0, b(t)]` while the
//! solution remains transverse. Here `a(t)` is the root of `u(., t) = alpha` right of
//! `abar - delta` and `b(t)` is its running maximum. The monitor below measures `a` and
//! `b` every step and flags loss of transversality instead of assuming a small horizon.

use crate::error::{Error, Result};
use crate::field::{FieldState, Grid, SpatialConfig};
use crate::pde::{solve, Monitor, RunStatus, Signal, SolverParams, Trajectory};
use crate::relay::{BranchPair, Config};

/// `|phi'| <` this counts as a zero slope.
pub const SLOPE_TOL: f64 = 1e-6;

/// Radius, in cells, of the neighbourhood that must carry the matching configuration.
pub const NEIGHBOURHOOD_CELLS: usize = 2;

/// Cap of `delta` as a fraction of `min(abar, 1 - abar)`.
pub const DELTA_CAP_FRACTION: f64 = 0.5;

/// Tolerance for `phi(abar) = alpha`.
pub const ROOT_TOL: f64 = 1e-9;

/// Default relative slack of the free-boundary estimate.
pub const LEMMA_B_SLACK: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrackStatus {
    Transverse,
    Lost,
}

impl TrackStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackStatus::Transverse => "transverse",
            TrackStatus::Lost => "lost",
        }
    }
}

/// Geometry fixed at `t = 0`: the initial front `abar`, half its slope `phibar`, and the
/// half-width `delta` of the window where the slope is monitored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackGeometry {
    pub abar: f64,
    pub phibar: f64,
    pub delta: f64,
}

impl TrackGeometry {
    /// Geometry of data that passes [`check_prototype`].
    pub fn from_prototype(
        phi: &[f64],
        xi0: &SpatialConfig,
        abar: f64,
        grid: &Grid,
        branches: &BranchPair,
    ) -> Result<Self> {
        let r = check_prototype(phi, xi0, abar, grid, branches);
        match (r.phibar, r.delta) {
            (Some(phibar), Some(delta)) if r.ok => Ok(Self {
                abar: grid.x(r.abar_index),
                phibar,
                delta,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "initial data fails prototype item {}",
                r.failed_item.unwrap_or(0)
            ))),
        }
    }
}

/// Time series of the free boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeBoundaryTrack {
    pub geometry: TrackGeometry,
    pub times: Vec<f64>,
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    pub status: Vec<TrackStatus>,
    /// Why the track was marked lost, if it was.
    pub lost_reason: Option<String>,
}

impl FreeBoundaryTrack {
    pub fn new(geometry: TrackGeometry) -> Self {
        Self {
            geometry,
            times: Vec::new(),
            a_values: Vec::new(),
            b_values: Vec::new(),
            status: Vec::new(),
            lost_reason: None,
        }
    }

    pub fn is_transverse(&self) -> bool {
        self.lost_reason.is_none()
    }

    /// Append `a` at time `t`; `b` becomes the running maximum.
    pub fn push(&mut self, t: f64, a: f64) {
        let b = self.b_values.last().map_or(a, |&b| b.max(a));
        self.times.push(t);
        self.a_values.push(a);
        self.b_values.push(b);
        self.status.push(TrackStatus::Transverse);
    }

    pub fn mark_lost(&mut self, reason: impl Into<String>) {
        if let Some(s) = self.status.last_mut() {
            *s = TrackStatus::Lost;
        }
        if self.lost_reason.is_none() {
            self.lost_reason = Some(reason.into());
        }
    }

    /// `b` at time `t`, if `t` is a recorded time.
    pub fn b_at(&self, t: f64) -> Option<f64> {
        self.times
            .iter()
            .position(|&s| s == t)
            .map(|i| self.b_values[i])
    }

    /// Rows `t, a, b, status`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,a,b,status")?;
        for i in 0..self.times.len() {
            let a = self.a_values[i];
            let b = self.b_values[i];
            writeln!(
                out,
                "{},{},{},{}",
                self.times[i],
                fmt_opt(a),
                fmt_opt(b),
                self.status[i].as_str()
            )?;
        }
        Ok(())
    }
}

fn fmt_opt(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

/// Derivative at node `i`: centred inside, one-sided at the ends.
fn slope_at(phi: &[f64], i: usize, h: f64) -> f64 {
    let n = phi.len();
    if n < 2 {
        0.0
    } else if i == 0 {
        (phi[1] - phi[0]) / h
    } else if i == n - 1 {
        (phi[n - 1] - phi[n - 2]) / h
    } else {
        (phi[i + 1] - phi[i - 1]) / (2.0 * h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransverseReport {
    pub transverse: bool,
    /// First node with a flat threshold contact and the wrong configuration nearby.
    pub offending: Option<usize>,
    /// Number of flat threshold contacts found.
    pub flat_contacts: usize,
}

/// Flat contacts with `alpha` need configuration 1 nearby; flat contacts with `beta`
/// need configuration 2 nearby.
pub fn check_transverse(
    phi: &[f64],
    xi: &SpatialConfig,
    branches: &BranchPair,
    grid: &Grid,
) -> TransverseReport {
    let h = grid.h();
    let contact_tol = h * h;
    let n = phi.len().min(xi.len());
    let mut flat_contacts = 0;
    for i in 0..n {
        if slope_at(phi, i, h).abs() >= SLOPE_TOL {
            continue;
        }
        let required = if (phi[i] - branches.alpha()).abs() <= contact_tol {
            Config::One
        } else if (phi[i] - branches.beta()).abs() <= contact_tol {
            Config::Two
        } else {
            continue;
        };
        flat_contacts += 1;
        let lo = i.saturating_sub(NEIGHBOURHOOD_CELLS);
        let hi = (i + NEIGHBOURHOOD_CELLS).min(n - 1);
        if xi.0[lo..=hi].iter().any(|&c| c != required) {
            return TransverseReport {
                transverse: false,
                offending: Some(i),
                flat_contacts,
            };
        }
    }
    TransverseReport {
        transverse: true,
        offending: None,
        flat_contacts,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeReport {
    pub ok: bool,
    /// First failing item: 1 step configuration, 2 a root of `phi = beta` left of
    /// `abar`, 3 a root of `phi = alpha` right of `abar` other than `abar`, 4 slope.
    pub failed_item: Option<u8>,
    pub abar_index: usize,
    /// `phi'(abar) / 2` on success.
    pub phibar: Option<f64>,
    /// Half-width of the slope window on success.
    pub delta: Option<f64>,
}

/// Check the prototype configuration around the front `abar` (snapped to a node).
pub fn check_prototype(
    phi: &[f64],
    xi0: &SpatialConfig,
    abar: f64,
    grid: &Grid,
    branches: &BranchPair,
) -> PrototypeReport {
    let ia = grid.nearest(abar);
    let fail = |item| PrototypeReport {
        ok: false,
        failed_item: Some(item),
        abar_index: ia,
        phibar: None,
        delta: None,
    };
    let n = grid.n_nodes();
    if phi.len() != n || xi0.len() != n || ia == 0 || ia >= n - 1 {
        return fail(1);
    }
    if *xi0 != SpatialConfig::step_at(grid, grid.x(ia)) {
        return fail(1);
    }
    if phi[..=ia].iter().any(|&p| p >= branches.beta()) {
        return fail(2);
    }
    let alpha = branches.alpha();
    if (phi[ia] - alpha).abs() > ROOT_TOL || phi[ia + 1..].iter().any(|&p| p <= alpha) {
        return fail(3);
    }
    let h = grid.h();
    let slope = slope_at(phi, ia, h);
    if !(slope > 0.0) {
        return fail(4);
    }
    let phibar = slope / 2.0;

    let x_a = grid.x(ia);
    let cap = DELTA_CAP_FRACTION * x_a.min(1.0 - x_a);
    let max_k = ((cap / h) + 1e-9).floor() as usize;
    let mut k = 0;
    while k < max_k {
        let next = k + 1;
        if ia < next || ia + next >= n {
            break;
        }
        if slope_at(phi, ia - next, h) < phibar || slope_at(phi, ia + next, h) < phibar {
            break;
        }
        k = next;
    }
    PrototypeReport {
        ok: true,
        failed_item: None,
        abar_index: ia,
        phibar: Some(phibar),
        delta: Some(k as f64 * h),
    }
}

/// Root of `u = alpha` on `[abar - delta, 1]`, by a grid scan with linear interpolation
/// inside the bracketing cell.
pub fn find_front(u: &[f64], alpha: f64, geometry: &TrackGeometry, grid: &Grid) -> Result<f64> {
    let h = grid.h();
    let start = grid.nearest(geometry.abar - geometry.delta);
    let above = |i: usize| u[i] > alpha;
    let mut crossings = Vec::new();
    for j in start..u.len() - 1 {
        if above(j) != above(j + 1) {
            crossings.push(j);
        }
    }
    match crossings.as_slice() {
        [] => Err(Error::NoRoot),
        [j] if !above(*j) => {
            let j = *j;
            let frac = (alpha - u[j]) / (u[j + 1] - u[j]);
            Ok(grid.x(j) + frac * h)
        }
        [_] => Err(Error::NoRoot),
        many => Err(Error::MultipleRoots { count: many.len() }),
    }
}

/// Locate `a(t)` for `state`, append it to the track, and return it. A missing or
/// non-unique root marks the track as lost.
pub fn locate_a(
    state: &FieldState,
    track: &mut FreeBoundaryTrack,
    grid: &Grid,
    branches: &BranchPair,
) -> Result<f64> {
    match find_front(&state.u, branches.alpha(), &track.geometry, grid) {
        Ok(a) => {
            track.push(state.t, a);
            Ok(a)
        }
        Err(e) => {
            let b = track.b_values.last().copied().unwrap_or(f64::NAN);
            track.times.push(state.t);
            track.a_values.push(f64::NAN);
            track.b_values.push(b);
            track.status.push(TrackStatus::Lost);
            track.mark_lost(e.to_string());
            Err(e)
        }
    }
}

/// `H1(u)` on nodes with `x <= b`, `H2(u)` on the rest.
pub fn hysteresis_from_free_boundary(
    state: &FieldState,
    b: f64,
    grid: &Grid,
    branches: &BranchPair,
) -> Result<Vec<f64>> {
    state
        .u
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let c = if grid.x(i) <= b {
                Config::One
            } else {
                Config::Two
            };
            branches.eval(c, u).map_err(|e| e.at_node(i))
        })
        .collect()
}

/// Monitor that records `a`, `b` and stops the run when transversality is lost.
#[derive(Clone, Debug)]
pub struct FreeBoundaryMonitor {
    pub track: FreeBoundaryTrack,
    branches: BranchPair,
}

impl FreeBoundaryMonitor {
    pub fn new(geometry: TrackGeometry, branches: &BranchPair) -> Self {
        Self {
            track: FreeBoundaryTrack::new(geometry),
            branches: branches.clone(),
        }
    }

    fn check(&mut self, grid: &Grid, state: &FieldState) -> std::result::Result<(), String> {
        let a =
            locate_a(state, &mut self.track, grid, &self.branches).map_err(|e| e.to_string())?;
        let g = self.track.geometry;
        let b = *self.track.b_values.last().unwrap_or(&a);
        let h = grid.h();
        let slack = 1e-12;
        if b > g.abar + g.delta + slack || b < g.abar - g.delta - slack {
            return Err(format!("b = {b} left [abar - delta, abar + delta]"));
        }
        let lo = grid.nearest(g.abar - g.delta);
        let hi = grid.nearest(g.abar + g.delta);
        for i in lo..hi {
            let s = (state.u[i + 1] - state.u[i]) / h;
            if s < g.phibar {
                return Err(format!("slope {s} < phibar at x = {}", grid.x(i)));
            }
        }
        for (i, &u) in state.u.iter().enumerate() {
            if grid.x(i) > b {
                break;
            }
            if u >= self.branches.beta() {
                return Err(format!("u reaches beta at x = {} <= b", grid.x(i)));
            }
        }
        Ok(())
    }
}

impl Monitor for FreeBoundaryMonitor {
    fn observe(&mut self, grid: &Grid, state: &FieldState) -> Signal {
        if !self.track.is_transverse() {
            return Signal::Stop(RunStatus::TransversalityLost);
        }
        match self.check(grid, state) {
            Ok(()) => Signal::Continue,
            Err(reason) => {
                self.track.mark_lost(reason);
                Signal::Stop(RunStatus::TransversalityLost)
            }
        }
    }
}

/// Solve with a free-boundary monitor and attach its track to the trajectory.
pub fn solve_tracked(
    phi: &[f64],
    xi0: &SpatialConfig,
    branches: &BranchPair,
    params: &SolverParams,
    geometry: TrackGeometry,
) -> Result<Trajectory> {
    let mut monitor = FreeBoundaryMonitor::new(geometry, branches);
    let mut traj = solve(phi, xi0, branches, params, &mut [&mut monitor])?;
    traj.track = Some(monitor.track);
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaBReport {
    /// `max_t |b(t) - b_hat(t)|`.
    pub lhs: f64,
    /// `max_{x,t} |u - u_hat| / phibar`.
    pub rhs: f64,
    pub holds: bool,
    /// Number of common transverse times compared.
    pub window: usize,
}

/// Compare the free-boundary distance of two runs with the sup distance of their
/// solutions: `max |b - b_hat| <= max |u - u_hat| / phibar`, with relative `slack`.
pub fn check_lemma_b_estimate(
    traj: &Trajectory,
    other: &Trajectory,
    slack: f64,
) -> Result<LemmaBReport> {
    if traj.params.grid != other.params.grid {
        return Err(Error::GridMismatch);
    }
    let (t1, t2) = match (&traj.track, &other.track) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::WindowEmpty),
    };
    let mut lhs: f64 = 0.0;
    let mut window = 0;
    let mut t_last = f64::NEG_INFINITY;
    let mut j = 0;
    for i in 0..t1.times.len() {
        if t1.status[i] != TrackStatus::Transverse {
            break;
        }
        let t = t1.times[i];
        while j < t2.times.len() && t2.times[j] < t {
            j += 1;
        }
        if j >= t2.times.len() || t2.status[j] != TrackStatus::Transverse {
            break;
        }
        if t2.times[j] != t {
            continue;
        }
        lhs = lhs.max((t1.b_values[i] - t2.b_values[j]).abs());
        window += 1;
        t_last = t;
    }
    if window == 0 {
        return Err(Error::WindowEmpty);
    }

    let mut sup_u: f64 = 0.0;
    let mut k = 0;
    for s in &traj.snapshots {
        if s.t > t_last {
            break;
        }
        while k < other.snapshots.len() && other.snapshots[k].t < s.t {
            k += 1;
        }
        if k < other.snapshots.len() && other.snapshots[k].t == s.t {
            let d =
                s.u.iter()
                    .zip(&other.snapshots[k].u)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            sup_u = sup_u.max(d);
        }
    }
    let rhs = sup_u / t1.geometry.phibar;
    Ok(LemmaBReport {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + slack),
        window,
    })
}
