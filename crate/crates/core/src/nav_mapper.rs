//! Discrete navigation actions from whole-frame scene motion.

use std::fmt;
use std::str::FromStr;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};

use crate::flowio::{scene_mask_from_flow, DepthImage, FlowField, DEFAULT_MOTION_THRESHOLD};
use crate::geometry::{CameraIntrinsics, Point3, Pose};
use crate::rigid_solver::{prepare_tracks, solve_tracks, SolverConfig, SolverError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NavAction {
    MoveForward,
    RotateLeft,
    RotateRight,
    Done,
}

impl NavAction {
    pub const ALL: [NavAction; 4] = [NavAction::MoveForward, NavAction::RotateLeft, NavAction::RotateRight, NavAction::Done];

    pub fn as_str(self) -> &'static str {
        match self {
            NavAction::MoveForward => "MoveForward",
            NavAction::RotateLeft => "RotateLeft",
            NavAction::RotateRight => "RotateRight",
            NavAction::Done => "Done",
        }
    }
}

impl fmt::Display for NavAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NavAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NavAction::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| format!("unknown action {s:?}"))
    }
}

/// Marker appended to an action list when tracking collapsed.
pub const REPLAN_MARKER: &str = "ReplanNeeded";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavThresholds {
    /// Distance of the imaginary point in front of the camera (m).
    pub probe_distance: f64,
    pub done_eps: f64,
    pub forward_max_lateral: f64,
    /// Pixels whose first flow magnitude exceeds this seed the tracks.
    pub motion_threshold: f64,
}

impl Default for NavThresholds {
    fn default() -> Self {
        Self { probe_distance: 1.0, done_eps: 0.001, forward_max_lateral: 0.25, motion_threshold: DEFAULT_MOTION_THRESHOLD }
    }
}

/// Moves the imaginary point by the scene transform and classifies its
/// displacement.
pub fn infer_nav_action(scene: &Pose, th: &NavThresholds) -> NavAction {
    let probe = Point3::new(0.0, 0.0, th.probe_distance);
    let d = scene.apply(&probe) - probe;
    if d.norm() < th.done_eps {
        NavAction::Done
    } else if d.x.abs() < th.forward_max_lateral {
        NavAction::MoveForward
    } else if d.x > 0.0 {
        NavAction::RotateLeft
    } else {
        NavAction::RotateRight
    }
}

/// Actions inferred for one generated clip.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NavEpisode {
    pub actions: Vec<NavAction>,
    /// Frame and surviving-track ratio at which tracking collapsed.
    pub replan: Option<(usize, f64)>,
    /// Per-step scene transforms the actions were read from.
    pub scene_steps: Vec<Pose>,
}

impl NavEpisode {
    pub fn replan_needed(&self) -> bool {
        self.replan.is_some()
    }

    pub fn labels(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = self.actions.iter().map(|a| a.as_str()).collect();
        if self.replan.is_some() {
            out.push(REPLAN_MARKER);
        }
        out
    }
}

/// Serialized as a JSON array of action names, ending in `"ReplanNeeded"`
/// when applicable.
impl Serialize for NavEpisode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let labels = self.labels();
        let mut seq = serializer.serialize_seq(Some(labels.len()))?;
        for l in labels {
            seq.serialize_element(l)?;
        }
        seq.end()
    }
}

/// Reads the actions of a clip from its flows and first depth map.
///
/// Tracks are seeded on pixels whose first flow exceeds
/// `th.motion_threshold`. Inference stops at the first `Done`. An empty
/// scene mask means nothing moved and yields `[Done]`.
pub fn run_nav_episode(
    flows: &[FlowField],
    depth0: &DepthImage,
    k: &CameraIntrinsics,
    th: &NavThresholds,
    config: &SolverConfig,
    seed: u64,
) -> Result<NavEpisode, SolverError> {
    let Some(first) = flows.first() else {
        return Ok(NavEpisode { actions: vec![NavAction::Done], ..Default::default() });
    };
    let mask = scene_mask_from_flow(first, th.motion_threshold);
    if mask.is_empty() {
        return Ok(NavEpisode { actions: vec![NavAction::Done], ..Default::default() });
    }
    let (points0, tracks) = prepare_tracks(k, depth0, &mask, flows, config, seed)?;
    let (traj, replan) = solve_tracks(k, &points0, &tracks, config, seed)?;
    let mut episode = NavEpisode::default();
    for report in &traj.increments {
        let action = infer_nav_action(&report.pose, th);
        episode.actions.push(action);
        episode.scene_steps.push(report.pose);
        if action == NavAction::Done {
            return Ok(episode);
        }
    }
    episode.replan = replan;
    Ok(episode)
}
