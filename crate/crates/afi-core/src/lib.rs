//! Spatial affordance costs over a voxelized workspace, proprioceptive
//! memory-trap detection, and rollback/waypoint recovery for desk-scale
//! manipulation.
//!
//! The crate is `no_std` + `alloc`: everything here is deterministic
//! geometry and bookkeeping. Simulation, file formats, and the benchmark
//! CLI live in the companion `afi-sim` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod camera;
pub mod field;
pub mod grid;
pub mod intervention;
pub mod kinematics;
pub mod math;
pub mod trap;

pub use grid::{OccupancyMask, WorkspaceGrid};
pub use math::Vec3;
