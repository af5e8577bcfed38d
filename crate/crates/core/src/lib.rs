//! Thresholding Multiple Outcomes (TMO) standard errors.
//!
//! Auxiliary outcomes observed for the same units are used to estimate which
//! pairs of units have correlated regression residuals. Those pairs enter a
//! sandwich variance for the coefficient of interest; all other off-diagonal
//! terms are set to zero.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod correlation;
pub mod dataset_io;
pub mod error;
pub mod null_threshold;
pub mod pipeline;
pub mod regression;
pub mod simulation;
pub mod stats;
pub mod variance;
pub mod warnings;

pub use error::{Result, TmoError};
