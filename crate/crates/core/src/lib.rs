//! Learning min-norm control Lyapunov function controllers from black-box
//! transitions.
//!
//! A policy `û(x, θ) = u_m(x) + W(x)θ` is trained to minimize
//! `E[‖û‖² + λ·max(0, Δ̃)]`, where `Δ̃` is a finite-difference estimate of the
//! CLF dissipation residual measured on one-step rollouts of an opaque plant.
//! Evaluation compares the result with the analytic min-norm controller.

pub mod cli;
pub mod clf;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod io;
pub mod policy;
pub mod rng;
pub mod sampling;
pub mod training;

pub use clf::{MinNormController, QuadraticClf};
pub use config::{Experiment, ExperimentConfig};
pub use dynamics::{double_pendulum, Controller, PendulumParams, SystemModel};
pub use error::{Error, Result};
pub use policy::{build_basis, Checkpoint, LinearPolicy, RbfBasis, RbfPolicy};
pub use training::{train, BlackBoxPlant, PlantStep, TrainConfig, TrainReport};
