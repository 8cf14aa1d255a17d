//! Task-oriented imputation for variable subset forecasting.
//!
//! A self-supervised imputer reconstructs every variable of a lookback window
//! from a randomly masked subset, and a forecaster consumes the reconstruction.
//! Both are trained jointly on a convex combination of the reconstruction and
//! forecasting losses, so imputation is shaped by what helps forecasting.

// NaN-rejecting range checks read best as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod forecaster;
pub mod gradcheck;
pub mod imputer;
mod nn;
pub mod rng;
pub mod subset;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
