//! Longitudinal platoon simulation with hybrid stochastic model predictive
//! control.
//!
//! Each follower regulates its gap error, speed error and acceleration with a
//! mixed-integer MPC that encodes an emergency-braking mode in big-M form.
//! The predecessor's future motion comes either from a communicated
//! acceleration profile or from a Gaussian-process speed forecast whose
//! uncertainty is discretized into weighted scenario levels.
//!
//! Module map:
//! - [`dynamics`]: spacing policy, plant, error-state model.
//! - [`gp`]: RBF Gaussian-process fit and forecast, scenario discretization.
//! - [`mld`]: mixed logical dynamical program assembly.
//! - [`qp`] / [`miqp`]: convex QP and branch-and-bound MIQP solvers.
//! - [`controller`]: predecessor-source selection, follower and leader MPC.
//! - [`comms`]: periodic lossy broadcast channel and packet layout.
//! - [`sim`]: scenario configuration, simulation loop, metrics and traces.

pub mod comms;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod miqp;
pub mod mld;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
