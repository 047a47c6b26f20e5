//! Optimal energy shaping for port-Hamiltonian systems.
//!
//! The crate provides the pieces needed to design passivity-preserving
//! controllers whose shaped potential and damping-injection gain are small
//! neural networks, trained by gradient descent on trajectory costs:
//!
//! - [`ph`]: port-Hamiltonian models, energy, passive output, matching residuals.
//! - [`neural`]: multilayer perceptrons with analytic first and second derivatives.
//! - [`controller`]: the energy-shaping law, a PD baseline with potential
//!   compensation, and the classical energy-balancing feedback.
//! - [`ode`]: adaptive Dormand-Prince 5(4) and fixed-step RK4 integrators.
//! - [`adjoint`]: exact cost gradients through the adjoint equations, plus a
//!   finite-difference oracle.
//! - [`optimize`]: costs, samplers, Adam, the training loop and Pareto sweeps.
//! - [`cli`]: configuration files and the command implementations behind the
//!   `oes` binary.

pub mod adjoint;
pub mod cli;
pub mod controller;
mod error;
pub mod neural;
pub mod ode;
pub mod optimize;
pub mod ph;

pub use error::{Error, Result};
