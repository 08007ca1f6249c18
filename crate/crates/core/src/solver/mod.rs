//! Sparse nonlinear least squares.
//!
//! Problems are sums of small residual blocks over a flat unknown vector. The
//! Jacobian is kept block-row sparse and never assembled; each Levenberg-Marquardt
//! step solves the damped normal equations with Jacobi-preconditioned conjugate
//! gradients using only `J v` and `Jᵀ y` products.

mod jet;
mod lm;
mod problem;

pub use jet::{Jet, Real};
pub use lm::{
    check_jacobian, check_jacobian_blocks, compute_step, solve, write_trace_csv, IterationRecord,
    JacobianCheck, LmState, SolveOptions, Summary, Termination,
};
pub use problem::{AutoDiff, CostFunction, GroupId, Problem, ResidualFn};
