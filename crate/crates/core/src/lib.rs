//! Reaction-diffusion equations `u_t = u_xx + v` on `[0, 1]` with Neumann boundary
//! conditions, where `v` is a relay hysteresis applied independently at every point.
//!
//! - [`relay`]: the scalar two-branch hysteresis operator and branch regularity checks.
//! - [`field`]: spatially distributed hysteresis on a uniform grid.
//! - [`pde`]: IMEX finite-difference solver and heat-kernel diagnostics.
//! - [`transverse`]: transversality checks and free-boundary tracking.
//! - [`slowfast`]: bistable slow-fast systems and their hysteresis limit.

// `!(x > y)` is used on purpose so that NaN fails range checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod interp;
pub mod pde;
pub mod relay;
pub mod slowfast;
pub mod transverse;

pub use error::{Error, Result};

/// Library version recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
