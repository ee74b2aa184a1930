//! Compiles an object pose trajectory into a manipulation plan: where to make
//! contact, whether to grasp or push, and the 3D waypoints to follow.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowio::{check_same_dims, DepthImage, FlowField, FlowIoError, MaskImage};
use crate::geometry::{CameraIntrinsics, Point3, Pose};
use crate::rigid_solver::{solve_trajectory, SolverConfig, SolverError, Trajectory};
use crate::tracking::{seed_tracks, TrackingError};

pub const PLAN_SCHEMA: &str = "flowrig.plan/1";

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("object mask is empty")]
    EmptyMask,
    #[error("no mask pixel has valid depth")]
    NoValidDepth,
    #[error("first subgoal coincides with the contact point; push direction undefined")]
    DegenerateDirection,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    FlowIo(#[from] FlowIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    Grasp,
    Push,
}

/// How the contact point is chosen from the object mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactStrategy {
    /// Mean of the backprojected samples.
    #[default]
    Centroid,
    /// One backprojected sample drawn at random.
    SampledPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalPlan {
    pub schema: String,
    pub mode: InteractionMode,
    pub contact: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach: Option<[f64; 3]>,
    pub subgoals: Vec<[f64; 3]>,
}

fn arr(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

pub fn to_point(a: &[f64; 3]) -> Point3 {
    Point3::new(a[0], a[1], a[2])
}

impl SubgoalPlan {
    pub fn new(mode: InteractionMode, contact: Point3, approach: Option<Point3>, subgoals: &[Point3]) -> Self {
        Self {
            schema: PLAN_SCHEMA.to_string(),
            mode,
            contact: arr(&contact),
            approach: approach.as_ref().map(arr),
            subgoals: subgoals.iter().map(arr).collect(),
        }
    }

    pub fn contact_point(&self) -> Point3 {
        to_point(&self.contact)
    }

    pub fn subgoal_points(&self) -> Vec<Point3> {
        self.subgoals.iter().map(to_point).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub contact_samples: usize,
    pub contact_strategy: ContactStrategy,
    /// Grasp iff some subgoal rises more than this above the contact (m).
    pub lift_threshold_m: f64,
    /// Push approach distance behind the contact (m).
    pub push_standoff_m: f64,
    /// World up direction in camera coordinates.
    pub up_axis: [f64; 3],
    pub replan_window: usize,
    pub replan_min_motion_m: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            contact_samples: 500,
            contact_strategy: ContactStrategy::Centroid,
            lift_threshold_m: 0.10,
            push_standoff_m: 0.10,
            up_axis: [0.0, -1.0, 0.0],
            replan_window: 15,
            replan_min_motion_m: 0.001,
        }
    }
}

fn sample_backprojected(
    k: &CameraIntrinsics,
    depth0: &DepthImage,
    mask: &MaskImage,
    n: usize,
    seed: u64,
) -> Result<Vec<Point3>, PlanError> {
    check_same_dims("depth", depth0.dims(), "mask", mask.dims())?;
    if mask.is_empty() {
        return Err(PlanError::EmptyMask);
    }
    let usable = mask.with_valid_depth(depth0);
    let pixels = match seed_tracks(&usable, n.max(1), seed) {
        Ok(p) => p,
        Err(TrackingError::EmptyMask) => return Err(PlanError::NoValidDepth),
        Err(e) => return Err(SolverError::from(e).into()),
    };
    pixels
        .iter()
        .map(|p| k.backproject(p, depth0.get(p.u as usize, p.v as usize)).map_err(|e| SolverError::from(e).into()))
        .collect()
}

/// Centroid of `n` backprojected mask samples.
pub fn contact_point(k: &CameraIntrinsics, depth0: &DepthImage, mask: &MaskImage, n: usize, seed: u64) -> Result<Point3, PlanError> {
    let pts = sample_backprojected(k, depth0, mask, n, seed)?;
    Ok(pts.iter().sum::<Point3>() / pts.len() as f64)
}

/// A single random backprojected mask point.
pub fn sampled_contact_point(k: &CameraIntrinsics, depth0: &DepthImage, mask: &MaskImage, seed: u64) -> Result<Point3, PlanError> {
    let pts = sample_backprojected(k, depth0, mask, 1, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Ok(pts[rng.random_range(0..pts.len())])
}

/// `T_t * contact` for every cumulative pose.
pub fn build_subgoals(contact: &Point3, trajectory: &[Pose]) -> Vec<Point3> {
    trajectory.iter().map(|t| t.apply(contact)).collect()
}

/// Grasp iff the largest vertical displacement of any subgoal from the
/// contact strictly exceeds `lift_threshold`.
pub fn decide_mode(subgoals: &[Point3], contact: &Point3, lift_threshold: f64, up: &Vector3<f64>) -> InteractionMode {
    let up = up.normalize();
    let max_lift = subgoals.iter().map(|s| (s - contact).dot(&up).abs()).fold(0.0, f64::max);
    if max_lift > lift_threshold {
        InteractionMode::Grasp
    } else {
        InteractionMode::Push
    }
}

/// Point `standoff` behind the contact, on the line from the first subgoal
/// through the contact.
pub fn push_approach(contact: &Point3, first_subgoal: &Point3, standoff: f64) -> Result<Point3, PlanError> {
    let dir = first_subgoal - contact;
    let len = dir.norm();
    if !(len > 1e-6) {
        return Err(PlanError::DegenerateDirection);
    }
    Ok(contact - dir * (standoff / len))
}

/// Stall detector over the commanded end-effector positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplanMonitor {
    window: usize,
    min_motion: f64,
    history: VecDeque<Point3>,
}

impl Default for ReplanMonitor {
    fn default() -> Self {
        Self::new(15, 0.001)
    }
}

impl ReplanMonitor {
    pub fn new(window: usize, min_motion: f64) -> Self {
        Self { window: window.max(1), min_motion, history: VecDeque::with_capacity(window + 1) }
    }

    pub fn history(&self) -> impl Iterator<Item = &Point3> {
        self.history.iter()
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Records a position; true once the window is full and no consecutive
    /// step inside it moved `min_motion` or more.
    pub fn should_replan(&mut self, position: Point3) -> bool {
        self.history.push_back(position);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        if self.history.len() < self.window {
            return false;
        }
        let max_step = self
            .history
            .iter()
            .zip(self.history.iter().skip(1))
            .map(|(a, b)| (b - a).norm())
            .fold(0.0, f64::max);
        max_step < self.min_motion
    }
}

/// Builds the plan for an already solved trajectory. `mode` overrides the
/// grasp/push decision, as on replanning.
pub fn plan_from_trajectory(
    contact: Point3,
    trajectory: &[Pose],
    config: &PlannerConfig,
    mode: Option<InteractionMode>,
) -> Result<SubgoalPlan, PlanError> {
    if trajectory.is_empty() {
        return Err(PlanError::EmptyTrajectory);
    }
    let subgoals = build_subgoals(&contact, trajectory);
    let up = to_point(&config.up_axis);
    let mode = mode.unwrap_or_else(|| decide_mode(&subgoals, &contact, config.lift_threshold_m, &up));
    let approach = match mode {
        InteractionMode::Grasp => None,
        InteractionMode::Push => Some(push_approach(&contact, &subgoals[0], config.push_standoff_m)?),
    };
    Ok(SubgoalPlan::new(mode, contact, approach, &subgoals))
}

/// End-to-end manipulation planning from flows, the first depth map and the
/// object mask.
#[allow(clippy::too_many_arguments)]
pub fn plan_manipulation(
    k: &CameraIntrinsics,
    depth0: &DepthImage,
    mask: &MaskImage,
    flows: &[FlowField],
    solver: &SolverConfig,
    planner: &PlannerConfig,
    seed: u64,
    mode: Option<InteractionMode>,
) -> Result<(SubgoalPlan, Trajectory), PlanError> {
    let contact = match planner.contact_strategy {
        ContactStrategy::Centroid => contact_point(k, depth0, mask, planner.contact_samples, seed)?,
        ContactStrategy::SampledPoint => sampled_contact_point(k, depth0, mask, seed)?,
    };
    let trajectory = solve_trajectory(k, depth0, mask, flows, solver, seed)?;
    let plan = plan_from_trajectory(contact, &trajectory.poses, planner, mode)?;
    Ok((plan, trajectory))
}
