//! Multiplicity-adjusted trend tests for proportions over quantitative dose
//! levels.
//!
//! Several marginal binomial GLMs (dose metameters × link functions, plus
//! Williams-type contrasts on a cell-means model) are fitted to the same
//! table, stacked through their influence contributions, and tested jointly
//! with a maximum test whose reference distribution is a correlated
//! multivariate normal.

// `!(x > 0.0)` deliberately treats NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrasts;
pub mod data;
pub mod error;
pub mod glm;
pub mod mmm;
pub mod mvn;
pub mod normal;
mod quad;
pub mod trendtest;

pub use error::{Error, Result};
