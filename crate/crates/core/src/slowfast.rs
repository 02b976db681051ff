//! Bistable slow-fast systems
//!
//! ```text
//! u_t = u_xx + f(u, v),    eps v_t = g(u, v)
//! ```
//!
//! whose nullcline `g = 0` is S-shaped. The outer (stable) parts of the nullcline are the
//! hysteresis branches of the `eps -> 0` limit. This module locates the folds, tabulates
//! the branches, checks the fold-regularity estimate behind the branch condition with
//! `sigma = (n - 1) / n`, integrates the system, and compares it with the hysteresis limit.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{FieldState, Grid};
use crate::pde::{diffusion_step, theta_for_step, RunStatus, SolverParams, Trajectory};
use crate::relay::{verify_branch_condition, BranchConditionReport, CutoffSide};
use crate::relay::{Branch, BranchPair, BranchTable, Config, FoldSide, TableAxis};

/// Step of the central differences used when partials are not supplied.
const PARTIAL_STEP: f64 = 1e-6;
/// Threshold for "non-zero" derivatives at a fold.
pub const FOLD_TOL: f64 = 1e-7;
/// Highest fold order searched for.
const MAX_FOLD_ORDER: u32 = 8;
/// Newton tolerance for points on the nullcline and for the `v` update.
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;
/// Substeps tried when the implicit `v` update does not converge in one step.
const FALLBACK_SUBSTEPS: usize = 10;
/// Smallest continuation step before giving up.
const MIN_ARC_STEP: f64 = 1e-10;
/// Ratio of consecutive continuation steps near a fold.
const CLUSTER_RATIO: f64 = 0.9;
/// Tube around the free boundary, in cells, excluded from the `v` comparison.
pub const TUBE_CELLS: f64 = 4.0;

type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Folds of the nullcline. `A = (alpha, v_a)` ends `H2`, `B = (beta, v_b)` ends `H1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Folds {
    pub alpha: f64,
    pub beta: f64,
    pub a: (f64, f64),
    pub b: (f64, f64),
    /// Fold order: the first `k` with `d^k g / dv^k != 0`.
    pub order: u32,
    /// `|d^n g / dv^n|` at `A` and `B`.
    pub leading_a: f64,
    pub leading_b: f64,
}

impl Folds {
    /// `v` halfway between the fold ordinates; the fast variable crosses it when it
    /// jumps between branches.
    pub fn midline(&self) -> f64 {
        0.5 * (self.a.1 + self.b.1)
    }

    /// Configuration whose branch lies on the same side of the midline as `v`.
    pub fn side(&self, v: f64) -> Config {
        if (v - self.midline()) * (self.b.1 - self.midline()) > 0.0 {
            Config::One
        } else {
            Config::Two
        }
    }
}

/// Fast-variable nonlinearity `g(u, v)` with its partial derivatives.
#[derive(Clone)]
pub struct NullclineModel {
    g: Fn2,
    gu: Option<Fn2>,
    gv: Option<Fn2>,
    folds: Option<Folds>,
}

impl std::fmt::Debug for NullclineModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NullclineModel")
            .field("analytic_partials", &(self.gu.is_some(), self.gv.is_some()))
            .field("folds", &self.folds)
            .finish()
    }
}

impl NullclineModel {
    /// Partials by central differences.
    pub fn new(g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            g: Arc::new(g),
            gu: None,
            gv: None,
            folds: None,
        }
    }

    pub fn with_partials(
        mut self,
        gu: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        gv: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.gu = Some(Arc::new(gu));
        self.gv = Some(Arc::new(gv));
        self
    }

    /// `g(u, v) = u + v - v^3` with analytic partials (folds not yet detected).
    pub fn cubic() -> Self {
        Self::new(|u, v| u + v - v * v * v).with_partials(|_, _| 1.0, |_, v| 1.0 - 3.0 * v * v)
    }

    /// `self` scaled by a constant factor (same zero set).
    pub fn scaled(&self, c: f64) -> Self {
        let g = self.g.clone();
        let mut out = Self::new(move |u, v| c * g(u, v));
        if let (Some(gu), Some(gv)) = (self.gu.clone(), self.gv.clone()) {
            out = out.with_partials(move |u, v| c * gu(u, v), move |u, v| c * gv(u, v));
        }
        out
    }

    pub fn g(&self, u: f64, v: f64) -> f64 {
        (self.g)(u, v)
    }

    pub fn gu(&self, u: f64, v: f64) -> f64 {
        match &self.gu {
            Some(f) => f(u, v),
            None => {
                (self.g(u + PARTIAL_STEP, v) - self.g(u - PARTIAL_STEP, v)) / (2.0 * PARTIAL_STEP)
            }
        }
    }

    pub fn gv(&self, u: f64, v: f64) -> f64 {
        match &self.gv {
            Some(f) => f(u, v),
            None => {
                (self.g(u, v + PARTIAL_STEP) - self.g(u, v - PARTIAL_STEP)) / (2.0 * PARTIAL_STEP)
            }
        }
    }

    pub fn folds(&self) -> Option<&Folds> {
        self.folds.as_ref()
    }

    /// Copy of the model with detected folds attached.
    pub fn detect(&self, v_range: (f64, f64), samples: usize) -> Result<Self> {
        let folds = detect_folds(self, v_range, samples)?;
        Ok(Self {
            folds: Some(folds),
            ..self.clone()
        })
    }

    fn require_folds(&self) -> Result<Folds> {
        self.folds
            .ok_or_else(|| Error::InvalidParameter("nullcline folds have not been detected".into()))
    }

    /// `u` with `g(u, v) = 0`, by Newton from `guess` with a bracketing fallback.
    pub fn curve_u(&self, v: f64, guess: f64) -> Result<f64> {
        let mut u = guess;
        for _ in 0..NEWTON_MAX_ITER {
            let r = self.g(u, v);
            let d = self.gu(u, v);
            if !(d.is_finite() && d != 0.0 && r.is_finite()) {
                break;
            }
            let step = r / d;
            u -= step;
            if step.abs() <= NEWTON_TOL * u.abs().max(1.0) {
                return Ok(u);
            }
        }
        self.bracket_u(v, guess)
    }

    fn bracket_u(&self, v: f64, guess: f64) -> Result<f64> {
        let fail = Error::NewtonDivergence { node: None, t: 0.0 };
        let mut w = 1.0;
        let (mut lo, mut hi);
        loop {
            lo = guess - w;
            hi = guess + w;
            if self.g(lo, v) * self.g(hi, v) <= 0.0 {
                break;
            }
            w *= 2.0;
            if w > 1e8 {
                return Err(fail);
            }
        }
        let glo = self.g(lo, v);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (self.g(mid, v) > 0.0) == (glo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= NEWTON_TOL * lo.abs().max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `v` with `g(u, v) = 0`, by Newton from `guess`.
    fn curve_v(&self, u: f64, guess: f64) -> Result<f64> {
        let mut v = guess;
        for _ in 0..NEWTON_MAX_ITER {
            let d = self.gv(u, v);
            let step = self.g(u, v) / d;
            if !step.is_finite() {
                break;
            }
            v -= step;
            if step.abs() <= NEWTON_TOL * v.abs().max(1.0) {
                return Ok(v);
            }
        }
        Err(Error::ContinuationStall { u, v })
    }

    /// `k`-th central difference of `g` in `v`.
    fn dv_k(&self, u: f64, v: f64, k: u32, step: f64) -> f64 {
        let mut sum = 0.0;
        let mut binom = 1.0;
        for j in 0..=k {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let offset = (k as f64 / 2.0 - j as f64) * step;
            sum += sign * binom * self.g(u, v + offset);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
        sum / step.powi(k as i32)
    }
}

/// Locate the two folds of the nullcline inside `v_range`.
///
/// The curve is parametrized by `v`; folds are the sign changes of `du/dv = -gv / gu`,
/// refined by bisection to `1e-12`.
pub fn detect_folds(model: &NullclineModel, v_range: (f64, f64), samples: usize) -> Result<Folds> {
    let (v_lo, v_hi) = v_range;
    if !(v_lo < v_hi) || samples < 3 {
        return Err(Error::InvalidParameter(
            "fold search needs v_lo < v_hi and at least 3 samples".into(),
        ));
    }
    let slope = |u: f64, v: f64| model.gv(u, v) / model.gu(u, v);
    let dv = (v_hi - v_lo) / (samples - 1) as f64;
    let mut u_prev = 0.0;
    let mut prev: Option<(f64, f64, bool)> = None;
    let mut folds = Vec::new();
    for j in 0..samples {
        let v = v_lo + j as f64 * dv;
        let u = model.curve_u(v, u_prev)?;
        let s = slope(u, v) >= 0.0;
        if let Some((v0, u0, s0)) = prev {
            if s != s0 {
                folds.push(bisect_fold(model, v0, v, u0, s0)?);
            }
        }
        prev = Some((v, u, s));
        u_prev = u;
    }
    if folds.len() != 2 {
        return Err(Error::FoldCountMismatch { found: folds.len() });
    }
    folds.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (a, b) = (folds[0], folds[1]);
    if !(b.0 - a.0 > NEWTON_TOL) {
        return Err(Error::InvalidParameter(format!(
            "folds at u = {} and u = {} do not enclose a bistable range",
            a.0, b.0
        )));
    }
    for &(u, v) in &[a, b] {
        if model.gu(u, v).abs() <= FOLD_TOL {
            return Err(Error::InvalidParameter(format!(
                "dg/du vanishes at the fold ({u}, {v})"
            )));
        }
    }
    let step = 1e-3 * (b.0 - a.0);
    let order_at = |p: (f64, f64)| -> Result<(u32, f64)> {
        let g_scale = model
            .g(p.0, p.1 + step)
            .abs()
            .max(model.gu(p.0, p.1).abs() * step);
        for k in 2..=MAX_FOLD_ORDER {
            let d = model.dv_k(p.0, p.1, k, step);
            let half = model.dv_k(p.0, p.1, k, 0.5 * step);
            // a genuine derivative survives halving the step; truncation terms shrink
            let noise =
                10.0 * f64::EPSILON * g_scale.max(1.0) * 2f64.powi(k as i32) / step.powi(k as i32);
            if d.abs() > FOLD_TOL + noise && half.abs() >= 0.5 * d.abs() {
                return if k % 2 == 0 {
                    Ok((k, d.abs()))
                } else {
                    Err(Error::BadFoldOrder(k as usize))
                };
            }
        }
        Err(Error::BadFoldOrder(0))
    };
    let (na, leading_a) = order_at(a)?;
    let (nb, leading_b) = order_at(b)?;
    if na != nb {
        return Err(Error::BadFoldOrder(na.max(nb) as usize));
    }
    Ok(Folds {
        alpha: a.0,
        beta: b.0,
        a,
        b,
        order: na,
        leading_a,
        leading_b,
    })
}

fn bisect_fold(
    model: &NullclineModel,
    mut lo: f64,
    mut hi: f64,
    u_guess: f64,
    s_lo: bool,
) -> Result<(f64, f64)> {
    let mut u = u_guess;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        u = model.curve_u(mid, u)?;
        let s = model.gv(u, mid) / model.gu(u, mid) >= 0.0;
        if s == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = 0.5 * (lo + hi);
    Ok((model.curve_u(v, u)?, v))
}

/// Point on the nullcline with the unit tangent there.
#[derive(Clone, Copy, Debug, PartialEq)]
struct CurvePoint {
    u: f64,
    v: f64,
    tu: f64,
    tv: f64,
}

fn unit_tangent(model: &NullclineModel, u: f64, v: f64, prev: (f64, f64)) -> (f64, f64) {
    let (a, b) = (model.gv(u, v), -model.gu(u, v));
    let norm = a.hypot(b);
    let (a, b) = (a / norm, b / norm);
    if a * prev.0 + b * prev.1 < 0.0 {
        (-a, -b)
    } else {
        (a, b)
    }
}

/// Direction in `v` that leaves the fold along its stable outer branch.
fn stable_direction(
    model: &NullclineModel,
    fold: (f64, f64),
    leaving_upward_in_u: bool,
) -> Result<f64> {
    let probe = 1e-4;
    for s in [1.0, -1.0] {
        let v = fold.1 + s * probe;
        let u = model.curve_u(v, fold.0)?;
        let moves_right = u > fold.0;
        if model.gv(u, v) < 0.0 && moves_right == leaving_upward_in_u {
            return Ok(s);
        }
    }
    Err(Error::InvalidParameter(format!(
        "no stable outer branch leaves the fold ({}, {})",
        fold.0, fold.1
    )))
}

/// Pseudo-arclength continuation from `fold` until `u` reaches `u_stop`.
fn trace_branch(
    model: &NullclineModel,
    fold: (f64, f64),
    v_dir: f64,
    u_stop: f64,
    ds_max: f64,
) -> Result<Vec<CurvePoint>> {
    let upward = u_stop > fold.0;
    let mut tau = unit_tangent(model, fold.0, fold.1, (0.0, v_dir));
    let mut pts = vec![CurvePoint {
        u: fold.0,
        v: fold.1,
        tu: tau.0,
        tv: tau.1,
    }];
    let mut ds = ds_max * 1e-3;
    let (mut u, mut v) = fold;
    for _ in 0..1_000_000 {
        match corrector(model, (u, v), tau, ds) {
            Some((un, vn)) => {
                let past = if upward { un >= u_stop } else { un <= u_stop };
                if past {
                    let frac = (u_stop - u) / (un - u);
                    let v_end = model.curve_v(u_stop, v + frac * (vn - v))?;
                    let t_end = unit_tangent(model, u_stop, v_end, tau);
                    if (u_stop - u).abs() > 1e-14 {
                        pts.push(CurvePoint {
                            u: u_stop,
                            v: v_end,
                            tu: t_end.0,
                            tv: t_end.1,
                        });
                    } else if let Some(last) = pts.last_mut() {
                        last.u = u_stop;
                    }
                    return Ok(pts);
                }
                tau = unit_tangent(model, un, vn, tau);
                u = un;
                v = vn;
                pts.push(CurvePoint {
                    u,
                    v,
                    tu: tau.0,
                    tv: tau.1,
                });
                ds = (ds / CLUSTER_RATIO).min(ds_max);
            }
            None => {
                ds *= 0.5;
                if ds < MIN_ARC_STEP {
                    return Err(Error::ContinuationStall { u, v });
                }
            }
        }
    }
    Err(Error::ContinuationStall { u, v })
}

/// Newton on `g = 0`, `tau . (x - x0) = ds` from the predictor `x0 + ds tau`.
fn corrector(
    model: &NullclineModel,
    x0: (f64, f64),
    tau: (f64, f64),
    ds: f64,
) -> Option<(f64, f64)> {
    let (mut u, mut v) = (x0.0 + ds * tau.0, x0.1 + ds * tau.1);
    for _ in 0..NEWTON_MAX_ITER {
        let f1 = model.g(u, v);
        let f2 = tau.0 * (u - x0.0) + tau.1 * (v - x0.1) - ds;
        let (gu, gv) = (model.gu(u, v), model.gv(u, v));
        let det = gu * tau.1 - gv * tau.0;
        if !(det.abs() > 0.0) {
            return None;
        }
        let du = (f1 * tau.1 - gv * f2) / det;
        let dv = (gu * f2 - tau.0 * f1) / det;
        u -= du;
        v -= dv;
        if !(u.is_finite() && v.is_finite()) {
            return None;
        }
        if du.abs().max(dv.abs()) <= NEWTON_TOL && model.g(u, v).abs() <= 1e-10 {
            return Some((u, v));
        }
    }
    None
}

/// Hermite table in `xi = |u - u_fold|^(1/n)` with exact slopes from the tangent.
fn table_from_points(
    pts: &[CurvePoint],
    fold_u: f64,
    order: u32,
    side: FoldSide,
    fold_slope: f64,
) -> Result<BranchTable> {
    let n = order as f64;
    let mut xi = Vec::with_capacity(pts.len());
    let mut v = Vec::with_capacity(pts.len());
    let mut d = Vec::with_capacity(pts.len());
    for (k, p) in pts.iter().enumerate() {
        let dist = match side {
            FoldSide::Above => p.u - fold_u,
            FoldSide::Below => fold_u - p.u,
        };
        let x = if k == 0 {
            0.0
        } else {
            dist.max(0.0).powf(1.0 / n)
        };
        if let Some(&last) = xi.last() {
            if !(x > last) {
                continue;
            }
        }
        let slope = if k == 0 {
            fold_slope
        } else {
            // dv/dxi = (dv/du) (du/dxi), du/dxi = +-n xi^(n-1)
            let du_dxi = n * x.powf(n - 1.0) * if side == FoldSide::Above { 1.0 } else { -1.0 };
            p.tv / p.tu * du_dxi
        };
        xi.push(x);
        v.push(p.v);
        d.push(slope);
    }
    BranchTable::on_axis(
        TableAxis::FoldRoot {
            fold_u,
            order,
            side,
        },
        xi,
        v,
        d,
    )
}

/// `dv/dxi` at the fold: `u - u_fold ~ (|g_v^(n)| / (n! |g_u|)) |v - v_fold|^n`.
fn fold_slope(
    model: &NullclineModel,
    fold: (f64, f64),
    order: u32,
    leading: f64,
    v_dir: f64,
) -> f64 {
    let fact: f64 = (1..=order).map(|k| k as f64).product();
    let c = leading / (fact * model.gu(fold.0, fold.1).abs());
    v_dir * c.powf(-1.0 / order as f64)
}

/// Tabulate `H1` on `[u_lo, beta]` and `H2` on `[alpha, u_hi]` by continuation from the
/// folds along the stable outer branches. `resolution` is the number of continuation
/// steps per unit of arclength scale; steps shrink geometrically toward the folds.
pub fn extract_branches(
    model: &NullclineModel,
    u_range: (f64, f64),
    resolution: usize,
) -> Result<BranchPair> {
    let folds = model.require_folds()?;
    let (u_lo, u_hi) = u_range;
    if !(u_lo < folds.alpha && u_hi > folds.beta) || resolution == 0 {
        return Err(Error::InvalidParameter(format!(
            "u range ({u_lo}, {u_hi}) must enclose [{}, {}]",
            folds.alpha, folds.beta
        )));
    }
    let scale = (folds.beta - folds.alpha) + (folds.a.1 - folds.b.1).abs();
    let n = folds.order;

    let dir_a = stable_direction(model, folds.a, true)?;
    let ds_a = (scale + (u_hi - folds.alpha)) / resolution as f64;
    let pts_a = trace_branch(model, folds.a, dir_a, u_hi, ds_a)?;
    check_stable(model, &pts_a)?;
    let h2 = table_from_points(
        &pts_a,
        folds.alpha,
        n,
        FoldSide::Above,
        fold_slope(model, folds.a, n, folds.leading_a, dir_a),
    )?;

    let dir_b = stable_direction(model, folds.b, false)?;
    let ds_b = (scale + (folds.beta - u_lo)) / resolution as f64;
    let pts_b = trace_branch(model, folds.b, dir_b, u_lo, ds_b)?;
    check_stable(model, &pts_b)?;
    let h1 = table_from_points(
        &pts_b,
        folds.beta,
        n,
        FoldSide::Below,
        fold_slope(model, folds.b, n, folds.leading_b, dir_b),
    )?;

    BranchPair::new(
        folds.alpha,
        folds.beta,
        Branch::Table(Arc::new(h1)),
        Branch::Table(Arc::new(h2)),
        (n - 1) as f64 / n as f64,
    )
}

fn check_stable(model: &NullclineModel, pts: &[CurvePoint]) -> Result<()> {
    for p in &pts[1..] {
        if !(model.gv(p.u, p.v) < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "outer branch is not stable at ({}, {})",
                p.u, p.v
            )));
        }
    }
    Ok(())
}

/// Two-column `u,v` export of a tabulated branch.
pub fn write_branch_csv<W: std::io::Write>(branch: &Branch, out: &mut W) -> std::io::Result<()> {
    let Branch::Table(t) = branch else {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "only tabulated branches can be exported",
        ));
    };
    writeln!(out, "u,v")?;
    for (u, v) in t.points() {
        writeln!(out, "{u},{v}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaA1Report {
    /// Largest `M` with `(G(w) - G(w')) / (w - w') >= M (G(w)^s + G(w')^s)` on the samples.
    pub m_estimate: f64,
    pub holds: bool,
    /// Branch condition on `H1` and `H2` with `sigma = (n - 1) / n`.
    pub h1_condition: BranchConditionReport,
    pub h2_condition: BranchConditionReport,
}

/// Smallest sampled value of `(G(w) - G(w')) / ((w - w') (G(w)^s + G(w')^s))`,
/// `s = (n - 1) / n`, over pairs `0 < w' < w <= eps0` on a geometric grid.
pub fn fold_estimate_constant(
    g: impl Fn(f64) -> f64,
    order: u32,
    eps0: f64,
    samples: usize,
) -> Result<f64> {
    if !(eps0 > 0.0) || samples < 2 || order < 2 {
        return Err(Error::InvalidParameter(
            "fold estimate needs eps0 > 0, samples >= 2 and order >= 2".into(),
        ));
    }
    let s = (order - 1) as f64 / order as f64;
    let r = 1e-6f64.powf(1.0 / (samples - 1) as f64);
    let pts: Vec<(f64, f64)> = (0..samples)
        .map(|j| {
            let w = eps0 * r.powi(j as i32);
            (w, g(w))
        })
        .collect();
    let mut m = f64::INFINITY;
    for i in 0..pts.len() {
        for &(w2, g2) in &pts[i + 1..] {
            let (w1, g1) = pts[i];
            if w1 == w2 {
                continue;
            }
            let denom = (w1 - w2) * (g1.max(0.0).powf(s) + g2.max(0.0).powf(s));
            m = m.min((g1 - g2) / denom);
        }
    }
    Ok(m)
}

/// Check the fold estimate at `A` with `G(w)` the `u`-offset of the nullcline at
/// `v = v_A + w` along `H2`, and run the branch condition on both branches.
pub fn verify_lemma_a1(
    branches: &BranchPair,
    model: &NullclineModel,
    eps0: Option<f64>,
    samples: usize,
) -> Result<LemmaA1Report> {
    let folds = model.require_folds()?;
    let eps0 = eps0.unwrap_or(0.1 * (folds.beta - folds.alpha));
    let dir = stable_direction(model, folds.a, true)?;
    let g_of_w = |w: f64| {
        model
            .curve_u(folds.a.1 + dir * w, folds.alpha)
            .map(|u| u - folds.alpha)
            .unwrap_or(f64::NAN)
    };
    let m_estimate = fold_estimate_constant(g_of_w, folds.order, eps0, samples)?;
    let sigma = (folds.order - 1) as f64 / folds.order as f64;
    let bound = 1.0 + folds.alpha.abs().max(folds.beta.abs());
    let h1_bound = match branches.branch(Config::One) {
        Branch::Table(t) => -t.u_lo(),
        _ => bound,
    };
    let h2_bound = match branches.branch(Config::Two) {
        Branch::Table(t) => t.u_hi(),
        _ => bound,
    };
    let h1_condition = verify_branch_condition(
        |u| branches.h1(u),
        branches.beta(),
        CutoffSide::UpperCutoffBeta,
        sigma,
        h1_bound,
        samples,
    )?;
    let h2_condition = verify_branch_condition(
        |u| branches.h2(u),
        branches.alpha(),
        CutoffSide::LowerCutoffAlpha,
        sigma,
        h2_bound,
        samples,
    )?;
    Ok(LemmaA1Report {
        holds: m_estimate > 0.0
            && m_estimate.is_finite()
            && !h1_condition.violated
            && !h2_condition.violated,
        m_estimate,
        h1_condition,
        h2_condition,
    })
}

/// State of the slow-fast system at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowFastState {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct SlowFastTrajectory {
    pub params: SolverParams,
    pub epsilon: f64,
    pub folds: Folds,
    pub snapshots: Vec<SlowFastState>,
    pub status: RunStatus,
    pub wall_time: f64,
}

impl SlowFastTrajectory {
    pub fn last(&self) -> &SlowFastState {
        self.snapshots
            .last()
            .expect("trajectory holds the initial state")
    }

    /// Rows `t, x, u, v, config`, with `config` the branch side of `v`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        let grid = self.params.grid;
        writeln!(out, "t,x,u,v,config")?;
        for s in &self.snapshots {
            for i in 0..s.u.len() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    s.t,
                    grid.x(i),
                    s.u[i],
                    s.v[i],
                    self.folds.side(s.v[i]).index()
                )?;
            }
        }
        Ok(())
    }
}

/// Backward Euler for `eps v' = g(u, v)` over `dt` with `u` frozen.
fn implicit_fast_update(model: &NullclineModel, u: f64, v: f64, dt: f64, eps: f64) -> Option<f64> {
    let mut w = v;
    for _ in 0..NEWTON_MAX_ITER {
        let f = eps * (w - v) - dt * model.g(u, w);
        let df = eps - dt * model.gv(u, w);
        let step = f / df;
        if !step.is_finite() {
            return None;
        }
        w -= step;
        if step.abs() <= NEWTON_TOL * w.abs().max(1.0) {
            return Some(w);
        }
    }
    None
}

fn fast_update(model: &NullclineModel, u: f64, v: f64, dt: f64, eps: f64) -> Option<f64> {
    implicit_fast_update(model, u, v, dt, eps).or_else(|| {
        let sub = dt / FALLBACK_SUBSTEPS as f64;
        (0..FALLBACK_SUBSTEPS).try_fold(v, |w, _| implicit_fast_update(model, u, w, sub, eps))
    })
}

/// Integrate the slow-fast system: diffusion of `u` with the explicit source `f(u, v)`,
/// then a backward-Euler update of `v` at every node using the new `u`.
pub fn solve_slowfast(
    phi_u: &[f64],
    phi_v: &[f64],
    model: &NullclineModel,
    f: impl Fn(f64, f64) -> f64,
    epsilon: f64,
    params: &SolverParams,
) -> Result<SlowFastTrajectory> {
    params.validate()?;
    let folds = model.require_folds()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive (got {epsilon})"
        )));
    }
    let grid = params.grid;
    if phi_u.len() != grid.n_nodes() || phi_v.len() != grid.n_nodes() {
        return Err(Error::InvalidParameter(format!(
            "initial data must have {} nodes",
            grid.n_nodes()
        )));
    }
    let started = Instant::now();
    let h = grid.h();
    let mut state = SlowFastState {
        t: 0.0,
        u: phi_u.to_vec(),
        v: phi_v.to_vec(),
        epsilon,
    };
    let mut snapshots = vec![state.clone()];
    let n_steps = params.n_steps();
    for k in 0..n_steps {
        let t_new = params.time_of(k + 1);
        let dt = t_new - params.time_of(k);
        let source: Vec<f64> = state
            .u
            .iter()
            .zip(&state.v)
            .map(|(&u, &v)| f(u, v))
            .collect();
        let u_new = diffusion_step(&state.u, &source, dt, theta_for_step(params, k), h)?;
        let mut v_new = Vec::with_capacity(u_new.len());
        for (i, (&u, &v)) in u_new.iter().zip(&state.v).enumerate() {
            let w = fast_update(model, u, v, dt, epsilon).ok_or(Error::NewtonDivergence {
                node: Some(i),
                t: state.t,
            })?;
            v_new.push(w);
        }
        state = SlowFastState {
            t: t_new,
            u: u_new,
            v: v_new,
            epsilon,
        };
        if (k + 1) % params.save_stride == 0 || k + 1 == n_steps {
            snapshots.push(state.clone());
        }
    }
    Ok(SlowFastTrajectory {
        params: *params,
        epsilon,
        folds,
        snapshots,
        status: RunStatus::Completed,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Deviation of a slow-fast run from the hysteresis limit.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub sup_dev_u: f64,
    /// Excludes nodes within the tube around the hysteresis front.
    pub sup_dev_v: f64,
    /// Per node: `None` if neither run switches, infinite if only one does.
    pub switch_time_offsets: Vec<Option<f64>>,
    pub max_switch_offset: f64,
    pub compared_times: usize,
}

/// First time `v` crosses the midline, interpolated linearly between snapshots.
fn slow_switch_times(slow: &SlowFastTrajectory) -> Vec<Option<f64>> {
    let m = slow.folds.midline();
    let n = slow.snapshots[0].v.len();
    (0..n)
        .map(|i| {
            let d0 = slow.snapshots[0].v[i] - m;
            slow.snapshots.windows(2).find_map(|w| {
                let (a, b) = (w[0].v[i] - m, w[1].v[i] - m);
                if (b > 0.0) != (d0 > 0.0) || b == 0.0 {
                    let frac = if a == b {
                        1.0
                    } else {
                        (a / (a - b)).clamp(0.0, 1.0)
                    };
                    Some(w[0].t + frac * (w[1].t - w[0].t))
                } else {
                    None
                }
            })
        })
        .collect()
}

/// First configuration change, placed where `u` crosses the threshold within the step.
fn relay_switch_times(hyst: &Trajectory, branches: &BranchPair) -> Vec<Option<f64>> {
    let first = &hyst.snapshots[0];
    (0..first.len())
        .map(|i| {
            let c0 = first.relays[i].config;
            hyst.snapshots.windows(2).find_map(|w| {
                let c = w[1].relays[i].config;
                if c == c0 {
                    return None;
                }
                let thr = match c {
                    Config::One => branches.alpha(),
                    Config::Two => branches.beta(),
                };
                let (a, b) = (w[0].u[i], w[1].u[i]);
                let frac = if a == b {
                    1.0
                } else {
                    ((thr - a) / (b - a)).clamp(0.0, 1.0)
                };
                Some(w[0].t + frac * (w[1].t - w[0].t))
            })
        })
        .collect()
}

fn near_front(state: &FieldState, grid: &Grid, i: usize, tube: f64) -> bool {
    let x = grid.x(i);
    state.relays.windows(2).enumerate().any(|(j, w)| {
        w[0].config != w[1].config && (0.5 * (grid.x(j) + grid.x(j + 1)) - x).abs() <= tube
    })
}

/// Compare a slow-fast run with a hysteresis run on the same grid. `branches` are the
/// `H` branches used to evaluate the limit `v`; `tube_r` defaults to four cells.
pub fn compare_to_hysteresis(
    slow: &SlowFastTrajectory,
    hyst: &Trajectory,
    branches: &BranchPair,
    burn_in: f64,
    tube_r: Option<f64>,
) -> Result<ComparisonReport> {
    let grid = slow.params.grid;
    if grid != hyst.params.grid {
        return Err(Error::GridMismatch);
    }
    let tube = tube_r.unwrap_or(TUBE_CELLS * grid.h());
    let mut sup_u: f64 = 0.0;
    let mut sup_v: f64 = 0.0;
    let mut compared = 0;
    let mut k = 0;
    for s in &slow.snapshots {
        while k < hyst.snapshots.len() && hyst.snapshots[k].t < s.t {
            k += 1;
        }
        if k >= hyst.snapshots.len() {
            break;
        }
        let hs = &hyst.snapshots[k];
        if hs.t != s.t || s.t < burn_in {
            continue;
        }
        compared += 1;
        for i in 0..s.u.len() {
            sup_u = sup_u.max((s.u[i] - hs.u[i]).abs());
            if near_front(hs, &grid, i, tube) {
                continue;
            }
            let vh = branches
                .eval(hs.relays[i].config, hs.u[i])
                .map_err(|e| e.at_node(i))?;
            sup_v = sup_v.max((s.v[i] - vh).abs());
        }
    }
    let ts = slow_switch_times(slow);
    let th = relay_switch_times(hyst, branches);
    let offsets: Vec<Option<f64>> = ts
        .iter()
        .zip(&th)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some((a - b).abs()),
            (None, None) => None,
            _ => Some(f64::INFINITY),
        })
        .collect();
    let max_switch_offset = offsets.iter().flatten().copied().fold(0.0, f64::max);
    Ok(ComparisonReport {
        sup_dev_u: sup_u,
        sup_dev_v: sup_v,
        switch_time_offsets: offsets,
        max_switch_offset,
        compared_times: compared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SpatialConfig;
    use crate::pde::solve;

    const V_RANGE: (f64, f64) = (-2.0, 2.0);

    fn cubic() -> NullclineModel {
        NullclineModel::cubic().detect(V_RANGE, 401).unwrap()
    }

    #[test]
    fn cubic_folds() {
        let f = *cubic().folds().unwrap();
        assert!((f.alpha + 0.3849002).abs() < 1e-7, "{}", f.alpha);
        assert!((f.beta - 0.3849002).abs() < 1e-7, "{}", f.beta);
        assert!((f.a.1 - 1.0 / 3f64.sqrt()).abs() < 1e-10);
        assert!((f.b.1 + 1.0 / 3f64.sqrt()).abs() < 1e-10);
        assert_eq!(f.order, 2);
        assert!(f.midline().abs() < 1e-12);
        assert_eq!(f.side(-1.0), Config::One);
    }

    #[test]
    fn fold_detection_without_analytic_partials() {
        let m = NullclineModel::new(|u, v| u + v - v * v * v)
            .detect(V_RANGE, 401)
            .unwrap();
        let f = m.folds().unwrap();
        assert!((f.alpha + CUBIC).abs() < 1e-7);
        assert_eq!(f.order, 2);
    }

    const CUBIC: f64 = crate::relay::CUBIC_FOLD_U;

    #[test]
    fn scaling_keeps_folds() {
        let a = cubic();
        let b = NullclineModel::cubic()
            .scaled(2.0)
            .detect(V_RANGE, 401)
            .unwrap();
        let (fa, fb) = (a.folds().unwrap(), b.folds().unwrap());
        assert!((fa.alpha - fb.alpha).abs() < 1e-12);
        assert!((fa.beta - fb.beta).abs() < 1e-12);
        assert_eq!(fa.order, fb.order);
    }

    #[test]
    fn fold_count_mismatch() {
        let monotone = NullclineModel::new(|u, v| u - v);
        assert_eq!(
            detect_folds(&monotone, V_RANGE, 101),
            Err(Error::FoldCountMismatch { found: 0 })
        );
        let one_fold = NullclineModel::new(|u, v| u - v * v);
        assert_eq!(
            detect_folds(&one_fold, V_RANGE, 101),
            Err(Error::FoldCountMismatch { found: 1 })
        );
    }

    #[test]
    fn quartic_folds_have_order_four() {
        // u = w(v) with w'(v) = (v^2 - 1)^3: folds at v = +-1 where d^4 g / dv^4 != 0
        let w = |v: f64| v.powi(7) / 7.0 - 0.6 * v.powi(5) + v.powi(3) - v;
        // analytic g_v: a numeric one only pins a quartic fold to ~eps^(1/3)
        let m = NullclineModel::new(move |u, v| u - w(v))
            .with_partials(|_, _| 1.0, |_, v| -(v * v - 1.0).powi(3));
        let f = detect_folds(&m, (-2.0, 2.0), 401).unwrap();
        assert_eq!(f.order, 4);
        assert!((f.a.1 - 1.0).abs() < 1e-6 || (f.a.1 + 1.0).abs() < 1e-6);
        assert!((f.beta - w(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn extracted_cubic_branches() {
        let m = cubic();
        let p = extract_branches(&m, (-2.0, 2.0), 400).unwrap();
        assert!((p.sigma() - 0.5).abs() < 1e-15);
        assert!((p.h2(0.0).unwrap() - 1.0).abs() < 1e-9);
        assert!((p.h1(0.0).unwrap() + 1.0).abs() < 1e-9);
        assert!((p.h2(p.alpha()).unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-9);
        assert!((p.h1(p.beta()).unwrap() + 1.0 / 3f64.sqrt()).abs() < 1e-9);
        let exact = BranchPair::cubic();
        let mut worst: f64 = 0.0;
        for k in 0..=4000 {
            let u = p.alpha() + (2.0 - p.alpha()) * k as f64 / 4000.0;
            worst = worst.max((p.h2(u).unwrap() - exact.h2(u).unwrap()).abs());
            let u = p.beta() - (2.0 + p.beta()) * k as f64 / 4000.0;
            worst = worst.max((p.h1(u).unwrap() - exact.h1(u).unwrap()).abs());
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn tables_lie_on_the_nullcline_and_are_stable() {
        let m = cubic();
        let p = extract_branches(&m, (-1.5, 1.5), 200).unwrap();
        for c in [Config::One, Config::Two] {
            let Branch::Table(t) = p.branch(c) else {
                panic!()
            };
            let pts = t.points();
            for &(u, v) in &pts {
                assert!(m.g(u, v).abs() <= 1e-10, "{u} {v}");
            }
            for w in pts.windows(2).skip(1) {
                let u = 0.5 * (w[0].0 + w[1].0);
                let v = p.eval(c, u).unwrap();
                assert!(m.gv(u, v) < 0.0);
                // g > 0 on the small-v side of the curve
                assert!(m.g(u, v - 1e-6) > 0.0 && m.g(u, v + 1e-6) < 0.0);
            }
        }
    }

    #[test]
    fn table_inverts_the_fold_parametrization() {
        let m = cubic();
        let f = *m.folds().unwrap();
        let p = extract_branches(&m, (-2.0, 2.0), 400).unwrap();
        for k in 1..=50 {
            let w = 0.05 * k as f64 / 50.0;
            let u = m.curve_u(f.a.1 + w, f.alpha).unwrap();
            assert!((p.h2(u).unwrap() - (f.a.1 + w)).abs() < 1e-8, "w = {w}");
        }
    }

    #[test]
    fn fold_estimate_for_pure_square_is_one() {
        let m = fold_estimate_constant(|w| w * w, 2, 0.1, 40).unwrap();
        assert!((m - 1.0).abs() < 1e-9, "{m}");
        for n in [2u32, 4, 6] {
            let m = fold_estimate_constant(|w| w.powi(n as i32), n, 0.1, 40).unwrap();
            assert!(m > 0.0 && m.is_finite(), "n = {n}: {m}");
        }
    }

    #[test]
    fn lemma_holds_for_cubic() {
        let m = cubic();
        let p = extract_branches(&m, (-1.0, 1.0), 400).unwrap();
        let r = verify_lemma_a1(&p, &m, None, 32).unwrap();
        assert!(r.holds, "{r:?}");
        assert!(r.m_estimate > 0.0);
        // G(w) = sqrt(3) w^2 + w^3, ratio -> 3^(1/4) near the fold
        assert!(
            (r.m_estimate - 3f64.powf(0.25)).abs() < 0.05,
            "{}",
            r.m_estimate
        );
    }

    #[test]
    fn frozen_input_stays_on_branch() {
        let m = cubic();
        let grid = Grid::new(1).unwrap();
        let p = BranchPair::cubic();
        let u = 0.1;
        let v0 = p.h2(u).unwrap();
        let params = SolverParams::new(grid, 0.5).with_dt(1e-3);
        let tr = solve_slowfast(&[u, u], &[v0, v0], &m, |_, _| 0.0, 1e-3, &params).unwrap();
        for s in &tr.snapshots {
            assert!((s.v[0] - v0).abs() < 1e-6);
            assert!((s.u[0] - u).abs() < 1e-14);
        }
    }

    #[test]
    fn large_epsilon_does_not_switch_abruptly() {
        let m = cubic();
        let grid = Grid::new(1).unwrap();
        let p = BranchPair::cubic();
        let v0 = p.h1(-0.5).unwrap();
        let params = SolverParams::new(grid, 0.5).with_dt(1e-3);
        let tr = solve_slowfast(&[-0.5, -0.5], &[v0, v0], &m, |_, _| 1.0, 1.0, &params).unwrap();
        let max_jump = tr
            .snapshots
            .windows(2)
            .map(|w| (w[1].v[0] - w[0].v[0]).abs())
            .fold(0.0, f64::max);
        assert!(max_jump < 5e-3, "{max_jump}");
    }

    #[test]
    fn ramp_tracks_lower_branch_then_jumps() {
        let m = cubic();
        let grid = Grid::new(1).unwrap();
        let p = BranchPair::cubic();
        let u0 = -0.5;
        let v0 = p.h1(u0).unwrap();
        let params = SolverParams::new(grid, 1.5)
            .with_dt(1e-5)
            .with_save_stride(10);
        let tr = solve_slowfast(&[u0, u0], &[v0, v0], &m, |_, _| 1.0, 1e-3, &params).unwrap();
        for s in &tr.snapshots {
            assert!((s.u[0] - (u0 + s.t)).abs() < 1e-9);
            if s.u[0] < p.beta() - 0.05 {
                assert!((s.v[0] - p.h1(s.u[0]).unwrap()).abs() < 0.01, "t = {}", s.t);
            }
            if s.u[0] > p.beta() + 0.2 {
                assert!((s.v[0] - p.h2(s.u[0]).unwrap()).abs() < 0.01, "t = {}", s.t);
            }
        }
    }

    #[test]
    fn rejects_undetected_model_and_bad_epsilon() {
        let grid = Grid::new(1).unwrap();
        let params = SolverParams::new(grid, 0.1);
        let raw = NullclineModel::cubic();
        assert!(solve_slowfast(&[0.0; 2], &[1.0; 2], &raw, |_, v| v, 1e-3, &params).is_err());
        assert!(solve_slowfast(&[0.0; 2], &[1.0; 2], &cubic(), |_, v| v, 0.0, &params).is_err());
    }

    #[test]
    fn comparison_with_itself_is_exact() {
        let grid = Grid::new(50).unwrap();
        let p = BranchPair::cubic();
        let phi = grid.sample(|x| p.alpha() + 0.6 * (x - 0.4));
        let xi = SpatialConfig::step_at(&grid, 0.4);
        let params = SolverParams::new(grid, 0.01).with_dt(1e-3);
        let hyst = solve(&phi, &xi, &p, &params, &mut []).unwrap();
        let slow = SlowFastTrajectory {
            params,
            epsilon: 0.0,
            folds: *cubic().folds().unwrap(),
            snapshots: hyst
                .snapshots
                .iter()
                .map(|s| SlowFastState {
                    t: s.t,
                    u: s.u.clone(),
                    v: s.v.clone(),
                    epsilon: 0.0,
                })
                .collect(),
            status: RunStatus::Completed,
            wall_time: 0.0,
        };
        let r = compare_to_hysteresis(&slow, &hyst, &p, 0.0, None).unwrap();
        assert_eq!(r.sup_dev_u, 0.0);
        assert_eq!(r.sup_dev_v, 0.0);
        assert_eq!(r.compared_times, hyst.snapshots.len());
        assert!(r.max_switch_offset <= params.dt);

        let other = SolverParams::new(Grid::new(20).unwrap(), 0.01);
        let mut mismatched = slow.clone();
        mismatched.params = other;
        assert_eq!(
            compare_to_hysteresis(&mismatched, &hyst, &p, 0.0, None),
            Err(Error::GridMismatch)
        );
    }

    #[test]
    fn branch_csv_export() {
        let p = extract_branches(&cubic(), (-1.0, 1.0), 20).unwrap();
        let mut buf = Vec::new();
        write_branch_csv(p.branch(Config::Two), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u,v\n"));
        assert!(text.lines().count() > 10);
        assert!(write_branch_csv(&Branch::CubicUpper, &mut Vec::new()).is_err());
    }
}
