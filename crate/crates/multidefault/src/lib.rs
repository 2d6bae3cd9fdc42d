//! Monte Carlo engine for backward stochastic differential equations driven by
//! a Brownian motion and `p` ordered default jumps.
//!
//! The crate simulates paths ([`scenario`]), builds stochastic exponentials
//! ([`calculus`]), represents optional dividend processes ([`dividend`]),
//! solves BSDEs with generalized drivers `g dt + dD` ([`bsde`]) and prices and
//! hedges claims in linear and non-linear markets ([`market`]).

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod calculus;
pub mod claim;
pub mod config;
pub mod dividend;
pub mod error;
pub mod func;
pub mod market;
pub mod runner;
pub mod scenario;
pub mod stats;

pub use error::{Error, Result};
pub use func::{Func, State};
