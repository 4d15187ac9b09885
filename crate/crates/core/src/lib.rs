//! Liquidity-adjusted multivariate volatility.
//!
//! The crate turns minute-level prices and dollar volumes into daily regular
//! and liquidity-adjusted return vectors, links their intraday covariances
//! through jump/diffusion liquidity matrices, forecasts next-day covariances
//! with a VECM -> DCC/ADCC -> Bayesian chain, and backtests constrained
//! mean-variance portfolios built from either set of inputs.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod condsvd;
pub mod dcc;
pub mod error;
pub mod linalg;
pub mod liquidity;
pub mod marketdata;
pub mod optimize;
pub mod persist;
pub mod pipeline;
pub mod portfolio;
pub mod report;
pub mod stats;
pub mod synth;
pub mod vecm;

pub use error::{Error, Result};
