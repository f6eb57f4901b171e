//! Box-constrained iterative LQR with exact implicit differentiation of the
//! converged trajectory with respect to dynamics and cost parameters.
//!
//! * [`models`]: parametric dynamics and costs with first and second derivatives.
//! * [`lqr`]: the box-constrained LQR subproblem and its derivatives.
//! * [`ilqr`]: the fixed-point iteration.
//! * [`implicit_diff`]: sensitivities of the fixed point.
//! * [`baselines`]: unrolled and finite-difference reference gradients.
//! * [`learning`]: imitation learning and system identification.

pub mod baselines;
pub mod error;
pub mod ilqr;
pub mod implicit_diff;
pub mod learning;
pub mod lqr;
pub mod models;

pub use error::{Error, Result};

/// Library version, embedded in experiment outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
