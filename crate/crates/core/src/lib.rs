//! Temporal action localization with uncertainty-aware boundary regression.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod losses;
pub mod model;
pub mod net;
pub mod numerics;
pub mod verify;

pub use error::{Error, Result};
