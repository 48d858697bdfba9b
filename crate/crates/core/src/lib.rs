//! Robust data-driven model predictive control.
//!
//! A single persistently exciting input/output experiment replaces the
//! plant model: trajectories are parametrised by Hankel matrices of the
//! recorded data, the controllability and observability constants needed
//! for output-constraint tightening are certified from the same data by
//! linear programming, and the receding-horizon problem is solved as a
//! convex QP in an `n`-step fashion.
//!
//! Module map:
//!
//! - [`lti`]: ground-truth plant, simulation and model-based oracles.
//! - [`hankel`]: Hankel matrices, persistence of excitation, data records.
//! - [`solver`]: LP/QP contracts and the interior-point backend.
//! - [`constants`]: data-driven estimation of `Γ`, `ρ_k`, `c_pe`, `ξ_max`.
//! - [`tightening`]: the output-constraint tightening coefficients.
//! - [`mpc`]: assembly and solution of the tightened MPC problem.
//! - [`harness`]: data generation, closed-loop experiments and exports.

pub mod constants;
pub mod error;
pub mod hankel;
pub mod harness;
pub mod lti;
pub mod mpc;
pub mod solver;
pub mod tightening;

pub use error::{Error, Result};
pub use nalgebra;
