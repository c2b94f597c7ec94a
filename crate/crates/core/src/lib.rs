//! Deterministic training of small grouped networks, iterative magnitude
//! pruning, and analysis of the resulting pruning trajectories as flows on
//! per-group observables.
//!
//! The pipeline:
//!
//! 1. [`data`] generates or loads a dataset.
//! 2. [`imp::run_imp`] trains a [`nn::GroupedModel`] and prunes it round by
//!    round, producing an [`trajectory::ImpTrajectory`].
//! 3. [`flow`] turns the trajectory into per-group observables, estimates
//!    exponents and labels each group relevant, marginal or irrelevant.
//! 4. [`scaling`] fits the error-versus-density law of a pruning curve.
//! 5. [`io`] persists trajectories and reports bit-exactly.

pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod imp;
pub mod io;
pub mod nn;
pub mod scaling;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor2;
