//! Regularised limited-angle reconstruction of the slowness map.
//!
//! The unknown minimises `|L (sigma - sigma0) - dtau|_1 + lambda h |D sigma|_1`.
//! Both norms are replaced by `sqrt(x^2 + eps^2)` and the smooth problem is
//! solved with L-BFGS, halving `eps` over a few warm-started restarts.

pub mod lbfgs;
mod regularizer;
mod solve;

pub use regularizer::{build_regularizer, Regularizer, RegularizerWeights};
pub use solve::{
    evaluate_objective, solve_slowness, ObjectiveValue, SmoothedObjective, SolveReport, SolverOptions,
    StageReport,
};
