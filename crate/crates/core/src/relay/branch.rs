use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::interp::HermiteTable;

use super::{Config, OVERSHOOT_TOL};

/// Fold abscissa of the cubic nullcline `u = v^3 - v`, i.e. `2 / (3 sqrt 3)`.
pub const CUBIC_FOLD_U: f64 = 0.384_900_179_459_750_5;

/// Scalar function of one real variable used as a hysteresis branch.
#[derive(Clone)]
pub enum Branch {
    Affine {
        slope: f64,
        intercept: f64,
    },
    /// Largest real root of `v^3 - v = u`, defined for `u >= -CUBIC_FOLD_U`.
    CubicUpper,
    /// Smallest real root of `v^3 - v = u`, defined for `u <= CUBIC_FOLD_U`.
    CubicLower,
    Formula(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    Table(Arc<BranchTable>),
    /// `f(u, inner(u))`.
    Composed {
        inner: Box<Branch>,
        f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    },
}

impl Branch {
    pub fn constant(c: f64) -> Self {
        Branch::Affine {
            slope: 0.0,
            intercept: c,
        }
    }

    pub fn formula(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Branch::Formula(Arc::new(f))
    }

    pub fn eval(&self, u: f64) -> Result<f64> {
        match self {
            Branch::Affine { slope, intercept } => Ok(intercept + slope * u),
            Branch::CubicUpper => cubic_upper_root(u),
            Branch::CubicLower => cubic_upper_root(-u).map(|v| -v),
            Branch::Formula(f) => {
                let v = f(u);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::EvaluationOutsideDomain(u))
                }
            }
            Branch::Table(t) => t.eval(u),
            Branch::Composed { inner, f } => {
                let v = inner.eval(u)?;
                Ok(f(u, v))
            }
        }
    }
}

impl fmt::Debug for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Affine { slope, intercept } => f
                .debug_struct("Affine")
                .field("slope", slope)
                .field("intercept", intercept)
                .finish(),
            Branch::CubicUpper => f.write_str("CubicUpper"),
            Branch::CubicLower => f.write_str("CubicLower"),
            Branch::Formula(_) => f.write_str("Formula(..)"),
            Branch::Table(t) => f
                .debug_struct("Table")
                .field("lo", &t.u_lo())
                .field("hi", &t.u_hi())
                .finish(),
            Branch::Composed { inner, .. } => f.debug_tuple("Composed").field(inner).finish(),
        }
    }
}

/// Largest real root of `v^3 - v - u = 0`.
fn cubic_upper_root(u: f64) -> Result<f64> {
    if !u.is_finite() || u < -CUBIC_FOLD_U - OVERSHOOT_TOL {
        return Err(Error::EvaluationOutsideDomain(u));
    }
    let v = if u <= CUBIC_FOLD_U {
        // three real roots; k = 0 of the trigonometric form is the largest
        let arg = (1.5 * 3f64.sqrt() * u).clamp(-1.0, 1.0);
        2.0 / 3f64.sqrt() * (arg.acos() / 3.0).cos()
    } else {
        let disc = (0.25 * u * u - 1.0 / 27.0).sqrt();
        let c = (0.5 * u + disc).cbrt();
        c + 1.0 / (3.0 * c)
    };
    // polish away from the fold where Newton is well conditioned
    let mut v = v;
    for _ in 0..2 {
        let dv = 3.0 * v * v - 1.0;
        if dv.abs() < 0.1 {
            break;
        }
        v -= (v * v * v - v - u) / dv;
    }
    Ok(v)
}

/// Which side of a fold a tabulated branch lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSide {
    /// Branch defined for `u <= fold_u` (an `H1`-type branch ending at `beta`).
    Below,
    /// Branch defined for `u >= fold_u` (an `H2`-type branch starting at `alpha`).
    Above,
}

/// Abscissa used for interpolation.
///
/// Near a fold of order `n` a branch behaves like `|u - u_fold|^(1/n)`, so it is
/// interpolated as a smooth function of `xi = |u - u_fold|^(1/n)` instead of `u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TableAxis {
    Identity,
    FoldRoot {
        fold_u: f64,
        order: u32,
        side: FoldSide,
    },
}

impl TableAxis {
    fn xi_of(self, u: f64) -> f64 {
        match self {
            TableAxis::Identity => u,
            TableAxis::FoldRoot {
                fold_u,
                order,
                side,
            } => {
                let d = match side {
                    FoldSide::Below => fold_u - u,
                    FoldSide::Above => u - fold_u,
                };
                d.max(0.0).powf(1.0 / order as f64)
            }
        }
    }

    fn u_of(self, xi: f64) -> f64 {
        match self {
            TableAxis::Identity => xi,
            TableAxis::FoldRoot {
                fold_u,
                order,
                side,
            } => {
                let d = xi.powi(order as i32);
                match side {
                    FoldSide::Below => fold_u - d,
                    FoldSide::Above => fold_u + d,
                }
            }
        }
    }
}

/// Tabulated branch `v = H(u)` with cubic Hermite interpolation along a [`TableAxis`].
#[derive(Clone, Debug)]
pub struct BranchTable {
    axis: TableAxis,
    table: HermiteTable,
    u_lo: f64,
    u_hi: f64,
}

impl BranchTable {
    /// Monotone (Fritsch–Carlson) interpolation of `(u, v)` pairs in `u`.
    pub fn monotone(points: &[(f64, f64)]) -> Result<Self> {
        let (u, v): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        let table = HermiteTable::monotone(u, v).ok_or_else(|| {
            Error::InvalidParameter("table needs >= 2 points with increasing u".into())
        })?;
        Ok(Self {
            u_lo: table.lo(),
            u_hi: table.hi(),
            axis: TableAxis::Identity,
            table,
        })
    }

    /// Hermite table on a transformed axis. `xi`, `v` and `dv_dxi` are given on the
    /// transformed axis and must be sorted by `xi`.
    pub fn on_axis(axis: TableAxis, xi: Vec<f64>, v: Vec<f64>, dv_dxi: Vec<f64>) -> Result<Self> {
        let table = HermiteTable::with_slopes(xi, v, dv_dxi).ok_or_else(|| {
            Error::InvalidParameter("table needs >= 2 points with increasing abscissa".into())
        })?;
        let a = axis.u_of(table.lo());
        let b = axis.u_of(table.hi());
        Ok(Self {
            axis,
            u_lo: a.min(b),
            u_hi: a.max(b),
            table,
        })
    }

    pub fn u_lo(&self) -> f64 {
        self.u_lo
    }

    pub fn u_hi(&self) -> f64 {
        self.u_hi
    }

    pub fn axis(&self) -> TableAxis {
        self.axis
    }

    /// Tabulated `(u, v)` pairs.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let (xi, v) = self.table.knots();
        let mut pts: Vec<(f64, f64)> = xi
            .iter()
            .zip(v)
            .map(|(&x, &y)| (self.axis.u_of(x), y))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    }

    pub fn eval(&self, u: f64) -> Result<f64> {
        let slack = OVERSHOOT_TOL;
        if !(u >= self.u_lo - slack && u <= self.u_hi + slack) {
            return Err(Error::EvaluationOutsideDomain(u));
        }
        let u = u.clamp(self.u_lo, self.u_hi);
        let xi = self.axis.xi_of(u).clamp(self.table.lo(), self.table.hi());
        self.table.eval(xi).ok_or(Error::EvaluationOutsideDomain(u))
    }
}

/// The two hysteresis branches with their switching thresholds.
///
/// `H1` is used on `(-inf, beta]`, `H2` on `[alpha, inf)`. `sigma` is the exponent of the
/// branch regularity condition: near the far threshold the branches may lose Lipschitz
/// continuity like `|u - threshold|^(1 - sigma)`.
#[derive(Clone, Debug)]
pub struct BranchPair {
    alpha: f64,
    beta: f64,
    h1: Branch,
    h2: Branch,
    sigma: f64,
    m_hint: Option<f64>,
}

impl BranchPair {
    pub fn new(alpha: f64, beta: f64, h1: Branch, h2: Branch, sigma: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && alpha < beta) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must satisfy alpha < beta (got {alpha}, {beta})"
            )));
        }
        if !(0.0..1.0).contains(&sigma) {
            return Err(Error::InvalidParameter(format!(
                "sigma must lie in [0, 1) (got {sigma})"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            h1,
            h2,
            sigma,
            m_hint: None,
        })
    }

    /// Stable outer branches of the nullcline of `g(u, v) = u + v - v^3`.
    pub fn cubic() -> Self {
        Self::new(
            -CUBIC_FOLD_U,
            CUBIC_FOLD_U,
            Branch::CubicLower,
            Branch::CubicUpper,
            0.5,
        )
        .expect("valid cubic thresholds")
    }

    /// Constant branches `H1 = c1`, `H2 = c2`.
    pub fn constant(alpha: f64, beta: f64, c1: f64, c2: f64) -> Result<Self> {
        Self::new(alpha, beta, Branch::constant(c1), Branch::constant(c2), 0.0)
    }

    pub fn with_m_hint(mut self, m: f64) -> Self {
        self.m_hint = Some(m);
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn m_hint(&self) -> Option<f64> {
        self.m_hint
    }

    pub fn branch(&self, config: Config) -> &Branch {
        match config {
            Config::One => &self.h1,
            Config::Two => &self.h2,
        }
    }

    /// `H1(u)`; inputs past `beta` by at most the overshoot tolerance are clamped.
    pub fn h1(&self, u: f64) -> Result<f64> {
        self.eval(Config::One, u)
    }

    /// `H2(u)`; inputs below `alpha` by at most the overshoot tolerance are clamped.
    pub fn h2(&self, u: f64) -> Result<f64> {
        self.eval(Config::Two, u)
    }

    pub fn eval(&self, config: Config, u: f64) -> Result<f64> {
        let (branch, arg) = match config {
            Config::One => {
                if u > self.beta + OVERSHOOT_TOL || u.is_nan() {
                    return Err(self.violation(config, u));
                }
                (&self.h1, u.min(self.beta))
            }
            Config::Two => {
                if u < self.alpha - OVERSHOOT_TOL || u.is_nan() {
                    return Err(self.violation(config, u));
                }
                (&self.h2, u.max(self.alpha))
            }
        };
        branch.eval(arg)
    }

    fn violation(&self, config: Config, u: f64) -> Error {
        Error::DomainViolation {
            branch: config.index(),
            input: u,
            threshold: match config {
                Config::One => self.beta,
                Config::Two => self.alpha,
            },
            node: None,
        }
    }

    /// Replace both branches by `F_j(u) = f(u, H_j(u))`, keeping thresholds and `sigma`.
    ///
    /// Turns `u_t = u_xx + f(u, v)` into the canonical form `u_t = u_xx + v`.
    pub fn reduce_general_rhs(&self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        let f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> = Arc::new(f);
        Self {
            h1: Branch::Composed {
                inner: Box::new(self.h1.clone()),
                f: f.clone(),
            },
            h2: Branch::Composed {
                inner: Box::new(self.h2.clone()),
                f,
            },
            ..self.clone()
        }
    }
}
