//! Sparse multi-task linear regression with ℓ0 constraints and support
//! heterogeneity regularization.

pub mod blockcd;
pub mod cli;
pub mod error;
pub mod io;
pub mod localsearch;
pub mod metrics;
pub mod objective;
pub mod oracle;
pub mod problem;
pub mod simgen;
pub mod study;
pub mod tuning;

pub use error::{Error, Result};
pub use problem::{method_mask, predict, HyperMask, Hyperparameters, MethodSpec, ModelFit, MtlProblem, TaskDataset};
