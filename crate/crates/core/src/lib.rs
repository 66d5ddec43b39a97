//! Local linear kernel regression for stationary random fields observed on
//! rectangular lattices, with the matching asymptotic theory and a Monte
//! Carlo harness built around two spatial autoregressive models.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod estimator;
pub mod experiment;
pub mod kernels;
pub mod lattice;
pub mod quadrature;
pub mod simulator;

pub use asymptotics::{limit_quantities, AsymptoticQuantities, TrueModel};
pub use estimator::{local_linear_fit, Bandwidth, FailureReason, FitFailure, LocalFit};
pub use kernels::{KernelFamily, KernelSpec};
pub use lattice::{LatticeField, LatticeShape, Site};
