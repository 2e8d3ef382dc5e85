//! Mean-field (McKean-Vlasov) SDEs on `R^d x P_2(R^d)`: empirical measures and
//! exact W2, cylindrical functions with closed-form L-derivatives, interacting
//! particle simulation, mean-field generators, additive functionals and
//! Girsanov weights, Feynman-Kac Monte Carlo, and a configuration-driven
//! scenario runner.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod feynman_kac;
pub mod functionals;
pub mod generator;
pub mod measure;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use measure::EmpiricalMeasure;
