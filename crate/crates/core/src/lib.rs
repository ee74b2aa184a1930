//! Rigid object and camera motion from dense flow plus a single depth map.

pub mod flowio;
pub mod geometry;
pub mod rigid_solver;
pub mod tracking;
pub mod diffusion;
pub mod manip_planner;
pub mod nav_mapper;
pub mod simulator;
