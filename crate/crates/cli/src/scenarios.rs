use clap::ValueEnum;
use flowrig::flowio::MaskImage;
use flowrig::geometry::Pose;
use flowrig::nav_mapper::NavAction;
use flowrig::rigid_solver::PoseRecord;
use flowrig::simulator::{
    expert_clip, inject_outliers, pick_and_place_scene, push_scene, random_camera_scene, random_rigid_scene, render_room,
    scripted_clip, track_loss_scene, translate_scene, zero_scene, NavClip, NavWorld, Room, SceneSpec,
};
use nalgebra::Vector3;

use crate::error::CliError;
use crate::fixture::{FixtureData, SceneMeta, SCENE_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    /// Box lifted then carried sideways (8 frames).
    Pick,
    /// Box slid sideways on its support (8 frames).
    Push,
    /// Box translated 2 cm right and 1 cm up per frame (8 frames).
    Translate,
    /// Nothing moves (8 frames).
    Zero,
    /// Box leaves the image within two frames.
    TrackLoss,
    /// Random two-frame rigid object motion.
    Random,
    /// Static scene, random camera motion (two frames, full mask).
    Duality,
    /// Room walk-through: three forward steps (8 frames).
    NavForward,
    /// Room walk-through: one left turn (2 frames).
    NavTurn,
    /// Turning in place until the view is lost (8 frames).
    NavSpin,
    /// Expert clip in a random room (8 frames).
    NavExpert,
}

impl Scenario {
    pub fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub seed: u64,
    pub lift: f64,
    /// Fraction of mask pixels whose flow is corrupted in every frame.
    pub outliers: f64,
    pub outlier_max_px: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self { seed: 0, lift: 0.15, outliers: 0.0, outlier_max_px: 20.0 }
    }
}

fn records(poses: impl Iterator<Item = Pose>) -> Vec<PoseRecord> {
    poses.map(|p| PoseRecord::from(&p)).collect()
}

fn from_scene(name: String, s: &SceneSpec, full_mask: bool, p: &ScenarioParams) -> Result<FixtureData, CliError> {
    let mut flows = s.render_flows()?;
    if p.outliers > 0.0 {
        for (t, f) in flows.iter_mut().enumerate() {
            let m = if full_mask { MaskImage::full(s.width, s.height) } else { s.render_mask(t, 0)? };
            inject_outliers(f, &m, p.outliers, p.outlier_max_px, p.seed.wrapping_add(t as u64));
        }
    }
    let mask = if full_mask { MaskImage::full(s.width, s.height) } else { s.render_mask(0, 0)? };
    let object_motion = if full_mask {
        records((1..s.frames).map(|t| s.scene_motion(t)))
    } else {
        records((1..s.frames).map(|t| s.object_motion(0, t)))
    };
    Ok(FixtureData {
        meta: SceneMeta {
            schema: SCENE_SCHEMA.into(),
            scenario: name,
            seed: p.seed,
            intrinsics: s.intrinsics,
            width: s.width,
            height: s.height,
            frames: s.frames,
            object_motion,
            camera_motion: records((1..s.frames).map(|t| s.camera_motion(t))),
            expert_actions: vec![],
        },
        depths: (0..s.frames).map(|t| s.render_depth(t)).collect::<Result<_, _>>()?,
        flows,
        mask,
    })
}

fn from_clip(name: String, world: &NavWorld, clip: NavClip, seed: u64) -> FixtureData {
    let first = clip.poses[0];
    let relative: Vec<Pose> = clip.poses[1..].iter().map(|c| first.inverse().compose(c)).collect();
    FixtureData {
        meta: SceneMeta {
            schema: SCENE_SCHEMA.into(),
            scenario: name,
            seed,
            intrinsics: clip.intrinsics,
            width: world.width,
            height: world.height,
            frames: clip.poses.len(),
            object_motion: records(relative.iter().map(|c| c.inverse())),
            camera_motion: records(relative.into_iter()),
            expert_actions: clip.expert_actions,
        },
        depths: clip
            .poses
            .iter()
            .map(|c| render_room(&world.room, &world.intrinsics, world.width, world.height, c).0)
            .collect(),
        flows: clip.flows,
        mask: MaskImage::full(world.width, world.height),
    }
}

/// Fixed room used by the scripted navigation scenarios.
pub fn scripted_world() -> NavWorld {
    NavWorld::new(Room::rectangle(8.0, 10.0), [4.0, 2.0], 0.0, [4.0, 8.0])
}

pub fn build(scenario: Scenario, p: &ScenarioParams) -> Result<FixtureData, CliError> {
    let name = scenario.name();
    let limit = 30f64.to_radians();
    match scenario {
        Scenario::Pick => from_scene(name, &pick_and_place_scene(p.lift), false, p),
        Scenario::Push => from_scene(name, &push_scene(), false, p),
        Scenario::Translate => from_scene(name, &translate_scene(Vector3::new(0.02, -0.01, 0.0), 8), false, p),
        Scenario::Zero => from_scene(name, &zero_scene(8), false, p),
        Scenario::TrackLoss => from_scene(name, &track_loss_scene(), false, p),
        Scenario::Random => from_scene(name, &random_rigid_scene(p.seed, limit, 0.5), false, p),
        Scenario::Duality => from_scene(name, &random_camera_scene(p.seed, limit, 0.5), true, p),
        Scenario::NavForward => {
            let w = scripted_world();
            Ok(from_clip(name, &w, scripted_clip(&w, 8, &[NavAction::MoveForward; 3]), p.seed))
        }
        Scenario::NavTurn => {
            let w = scripted_world();
            Ok(from_clip(name, &w, scripted_clip(&w, 2, &[NavAction::RotateLeft]), p.seed))
        }
        Scenario::NavSpin => {
            let w = scripted_world();
            Ok(from_clip(name, &w, scripted_clip(&w, 8, &[NavAction::RotateLeft; 7]), p.seed))
        }
        Scenario::NavExpert => {
            let w = NavWorld::random(p.seed);
            Ok(from_clip(name, &w, expert_clip(&w, 8), p.seed))
        }
    }
}
