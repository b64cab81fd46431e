//! Control-reduced sequential quadratic programming for box-constrained
//! problems `min 𝒥(u) + (κ/2)‖u‖²` on a finite measure space, with finite
//! element optimal control instances and verification oracles.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod elliptic;
pub mod error;
pub mod exec;
pub mod fem;
pub mod measure;
pub mod parabolic;
pub mod problem;
pub mod qp;
pub mod sqp;
pub mod verification;

pub use error::{Result, SqpError};
pub use measure::{
    classify_active, project_box, weighted_inner, weighted_norm, ActiveSetPartition, BoxBounds,
    GridFunction, MeasureSpace,
};
pub use problem::{
    fd_gradient_check, fd_hessian_check, gradient, kkt_residual, symmetry_defect, FullObjective,
    LagrangeNewtonOracle, Method, ProblemOracle, SqpConfig,
};
