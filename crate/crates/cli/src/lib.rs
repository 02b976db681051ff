//! Command-line experiments for the `hystereact` library.

// `!(x > y)` is used on purpose so that NaN fails range checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;
