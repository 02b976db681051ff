use thiserror::Error;

/// Errors raised by the hysteresis, solver and verification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The input left the domain of the active branch by more than the
    /// overshoot tolerance. Usually a switch was missed because the step was too large.
    #[error("input {input} is outside the domain of branch H{branch} (threshold {threshold}){}", fmt_node(.node))]
    DomainViolation {
        branch: u8,
        input: f64,
        threshold: f64,
        node: Option<usize>,
    },

    #[error("branch evaluated outside its domain at u = {0}")]
    EvaluationOutsideDomain(f64),

    #[error("initial data inconsistent with the configuration at node {node}")]
    InconsistentInitialData { node: usize },

    #[error("tridiagonal system is singular")]
    LinearSolveFailure,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{count} roots of u = alpha in the search window")]
    MultipleRoots { count: usize },

    #[error("no root of u = alpha in the search window")]
    NoRoot,

    #[error("trajectories share no transverse save times")]
    WindowEmpty,

    #[error("expected two folds of the nullcline, found {found}")]
    FoldCountMismatch { found: usize },

    #[error("fold order {0} is not an even integer >= 2")]
    BadFoldOrder(usize),

    #[error("Newton iteration diverged{} at t = {t}", fmt_node(.node))]
    NewtonDivergence { node: Option<usize>, t: f64 },

    #[error("continuation stalled near ({u}, {v})")]
    ContinuationStall { u: f64, v: f64 },

    #[error("trajectories are defined on different grids")]
    GridMismatch,
}

fn fmt_node(node: &Option<usize>) -> String {
    match node {
        Some(i) => format!(" at node {i}"),
        None => String::new(),
    }
}

impl Error {
    /// Attach a node index to errors that carry one.
    pub fn at_node(self, i: usize) -> Self {
        match self {
            Error::DomainViolation {
                branch,
                input,
                threshold,
                ..
            } => Error::DomainViolation {
                branch,
                input,
                threshold,
                node: Some(i),
            },
            Error::NewtonDivergence { t, .. } => Error::NewtonDivergence { node: Some(i), t },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
