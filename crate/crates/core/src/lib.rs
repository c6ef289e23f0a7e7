//! Robust approximate symbolic models for continuous-time uncertain
//! nonlinear systems, connected to their lattice abstraction through a
//! control interface.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkernel`]: dense numerics (Jacobi eigensolver, Riccati, RK4).
//! - [`geometry`]: axis-aligned boxes.
//! - [`lattice`]: the state lattice and its quantizer.
//! - [`systems`]: concrete, abstract and incrementally quadratic systems,
//!   signals and trajectories.
//! - [`certificates`]: certificate checks, falsifiers and closed-form bounds.
//! - [`hierarchy`]: the control interface and concrete/abstract co-simulation.
//! - [`planner`]: lattice-level recurrence planning and input refinement.
//! - [`examples`]: the two reference configurations.

pub mod certificates;
pub mod examples;
pub mod geometry;
pub mod hierarchy;
pub mod lattice;
pub mod numkernel;
pub mod planner;
pub mod systems;

pub use geometry::Aabb;
pub use lattice::{LatticePoint, Quantizer};
pub use numkernel::{Matrix, Vector};
