//! Fixed-budget best-arm identification for sparse linear bandits.
//!
//! Every numerical routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f64` case.

// `!(x > 0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod analysis;
pub mod design;
pub mod error;
pub mod harness;
pub mod model;
pub mod scalar;
pub mod sparse;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BanditInstance = model::BanditInstance<f64>;
pub type InstanceSummary = model::InstanceSummary<f64>;
pub type Allocation = design::Allocation<f64>;
pub type GramMatrix = design::GramMatrix<f64>;
pub type RegressionProblem = sparse::RegressionProblem<f64>;
pub type SparseEstimate = sparse::SparseEstimate<f64>;
pub type TheoryInputs = analysis::TheoryInputs<f64>;
