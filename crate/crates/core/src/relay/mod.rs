//! Scalar two-branch relay hysteresis.
//!
//! The relay has two configurations. It switches to configuration 1 whenever the input
//! attains `alpha` and to configuration 2 whenever it attains `beta`; between events it
//! keeps its configuration. The output is `H1(g)` or `H2(g)` depending on the configuration.
//!
//! Discrete inputs are read as piecewise linear in time, so a step from `g0` to `g1` is
//! searched for threshold times along the segment and the latest one decides.

mod branch;
mod regularity;

pub use branch::{Branch, BranchPair, BranchTable, FoldSide, TableAxis, CUBIC_FOLD_U};
pub use regularity::{verify_branch_condition, BranchConditionReport, CutoffSide};

use crate::error::Result;

/// Absolute tolerance under which the input counts as touching a threshold.
pub const SWITCH_TOL: f64 = 1e-12;

/// How far past a branch domain an input may land before it is a domain violation.
pub const OVERSHOOT_TOL: f64 = 1e-9;

/// Relay configuration: which branch is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Config {
    One,
    Two,
}

impl Config {
    pub fn index(self) -> u8 {
        match self {
            Config::One => 1,
            Config::Two => 2,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(Config::One),
            2 => Some(Config::Two),
            _ => None,
        }
    }
}

/// Configuration at the initial time.
pub fn initial_config(zeta0: Config, g0: f64, branches: &BranchPair) -> Config {
    if g0 <= branches.alpha() {
        Config::One
    } else if g0 >= branches.beta() {
        Config::Two
    } else {
        zeta0
    }
}

/// The latest threshold attainment on a linear step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdEvent {
    /// Position of the event within the step, in `(0, 1]`.
    pub fraction: f64,
    /// Configuration selected by the threshold that was attained.
    pub config: Config,
}

/// Latest time in `(0, 1]` at which the segment `g0 -> g1` attains `alpha` or `beta`.
pub fn last_threshold_event(g0: f64, g1: f64, alpha: f64, beta: f64) -> Option<ThresholdEvent> {
    let a = last_hit(g0, g1, alpha).map(|s| ThresholdEvent {
        fraction: s,
        config: Config::One,
    });
    let b = last_hit(g0, g1, beta).map(|s| ThresholdEvent {
        fraction: s,
        config: Config::Two,
    });
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.fraction > a.fraction { b } else { a }),
        (a, b) => a.or(b),
    }
}

fn last_hit(g0: f64, g1: f64, level: f64) -> Option<f64> {
    if (g1 - level).abs() <= SWITCH_TOL {
        return Some(1.0);
    }
    let d = g1 - g0;
    if d == 0.0 {
        return None;
    }
    let s = (level - g0) / d;
    (s > 0.0 && s <= 1.0).then_some(s)
}

/// State of one relay: active configuration and the last accepted input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelayState {
    pub config: Config,
    pub last_input: f64,
}

impl RelayState {
    pub fn new(zeta0: Config, g0: f64, branches: &BranchPair) -> Self {
        Self {
            config: initial_config(zeta0, g0, branches),
            last_input: g0,
        }
    }

    /// Advance the relay along the linear segment from `last_input` to `g_new`.
    #[must_use]
    pub fn update(&self, g_new: f64, branches: &BranchPair) -> Self {
        let config =
            last_threshold_event(self.last_input, g_new, branches.alpha(), branches.beta())
                .map_or(self.config, |e| e.config);
        Self {
            config,
            last_input: g_new,
        }
    }

    /// Whether [`update`](Self::update) with `g_new` would change the configuration,
    /// and where in the step the deciding event happens.
    pub fn pending_switch(&self, g_new: f64, branches: &BranchPair) -> Option<ThresholdEvent> {
        last_threshold_event(self.last_input, g_new, branches.alpha(), branches.beta())
            .filter(|e| e.config != self.config)
    }

    /// `H_config(g)`.
    pub fn output(&self, g: f64, branches: &BranchPair) -> Result<f64> {
        branches.eval(self.config, g)
    }
}
