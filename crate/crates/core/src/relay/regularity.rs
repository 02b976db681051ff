//! Sampling check of the branch regularity condition
//!
//! ```text
//! |H(u) - H(w)| <= M / (d(u)^sigma + d(w)^sigma) * |u - w|
//! ```
//!
//! where `d` is the distance to the threshold at which the branch ends.

use crate::error::{Error, Result};

/// Which threshold the branch is cut off at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutoffSide {
    /// `H1`: defined on `[-U, beta)`, distance `beta - u`.
    UpperCutoffBeta,
    /// `H2`: defined on `(alpha, U]`, distance `u - alpha`.
    LowerCutoffAlpha,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchConditionReport {
    /// Supremum of the sampled ratio at the finest level.
    pub m_estimate: f64,
    /// Pair `(u, w)` attaining the supremum.
    pub max_ratio_location: (f64, f64),
    pub violated: bool,
    /// Supremum per refinement level, coarse to fine.
    pub history: Vec<f64>,
}

/// Refinement doublings beyond the base level.
const DOUBLINGS: u32 = 3;
/// Growth of the supremum per doubling that counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1.5;
/// Closest approach to the threshold at the finest level, relative to the range.
const FINEST_DISTANCE: f64 = 1e-12;

/// Estimate the constant `M` of the regularity condition for one branch.
///
/// Samples are the union of a uniform grid over the range and a geometric grid of
/// distances that clusters at the threshold. The level with `samples * 2^k` points of
/// each kind reaches a distance `FINEST_DISTANCE^((k + 1) / 4)` (relative to the range),
/// so each doubling both fills in and approaches the threshold by a fixed number of
/// decades. The supremum of
/// the ratio over all sample pairs is computed at every level; the branch is reported as
/// violating the condition when the supremum grows by more than `DIVERGENCE_FACTOR` at
/// each of the three doublings.
pub fn verify_branch_condition<F>(
    branch: F,
    threshold: f64,
    side: CutoffSide,
    sigma: f64,
    u_bound: f64,
    samples: usize,
) -> Result<BranchConditionReport>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::InvalidParameter(format!(
            "sigma must lie in [0, 1) (got {sigma})"
        )));
    }
    if samples < 2 {
        return Err(Error::InvalidParameter("samples must be >= 2".into()));
    }
    let span = match side {
        CutoffSide::UpperCutoffBeta => threshold + u_bound,
        CutoffSide::LowerCutoffAlpha => u_bound - threshold,
    };
    if !(span > 0.0 && span.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "empty sampling range for threshold {threshold} and U = {u_bound}"
        )));
    }

    let mut history = Vec::with_capacity(DOUBLINGS as usize + 1);
    let mut best = (0.0, (threshold, threshold));
    for level in 0..=DOUBLINGS {
        let n = samples << level;
        let depth = FINEST_DISTANCE.powf((level + 1) as f64 / (DOUBLINGS + 1) as f64);
        let ratio = depth.powf(1.0 / (n - 1) as f64);
        let mut dists: Vec<f64> = (0..n).map(|j| span * ratio.powi(j as i32)).collect();
        // uniform part: distances span * k / n, k = 1..n
        dists.extend((1..=n).map(|k| span * k as f64 / n as f64));
        dists.sort_by(|a, b| b.total_cmp(a));
        dists.dedup();

        let mut pts = Vec::with_capacity(dists.len());
        for d in dists {
            let u = match side {
                CutoffSide::UpperCutoffBeta => threshold - d,
                CutoffSide::LowerCutoffAlpha => threshold + d,
            };
            let dist = match side {
                CutoffSide::UpperCutoffBeta => threshold - u,
                CutoffSide::LowerCutoffAlpha => u - threshold,
            };
            if dist <= 0.0 {
                continue;
            }
            let h = branch(u).map_err(|e| match e {
                Error::DomainViolation { .. } => Error::EvaluationOutsideDomain(u),
                other => other,
            })?;
            pts.push((u, dist.powf(sigma), h));
        }

        let mut sup = 0.0;
        let mut loc = (threshold, threshold);
        for i in 0..pts.len() {
            let (u, wu, hu) = pts[i];
            for &(w, ww, hw) in &pts[i + 1..] {
                let du = (u - w).abs();
                if du == 0.0 {
                    continue;
                }
                let r = (hu - hw).abs() * (wu + ww) / du;
                if r > sup {
                    sup = r;
                    loc = (u, w);
                }
            }
        }
        history.push(sup);
        best = (sup, loc);
    }

    let violated = history.windows(2).all(|w| w[1] > DIVERGENCE_FACTOR * w[0]);
    Ok(BranchConditionReport {
        m_estimate: best.0,
        max_ratio_location: best.1,
        violated,
        history,
    })
}
