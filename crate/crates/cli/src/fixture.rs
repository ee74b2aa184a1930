//! Fixture directories: `frame_%03d.pgm` depth (mm), `flow_%03d.flo`,
//! `mask.pgm` and `scene.json`.

use std::fs;
use std::path::{Path, PathBuf};

use flowrig::flowio::{
    encode_depth_pgm, encode_flow, encode_mask_pgm, read_depth_pgm, read_flow, read_mask_pgm, DepthImage, FlowField, MaskImage,
};
use flowrig::geometry::{CameraIntrinsics, Pose};
use flowrig::nav_mapper::NavAction;
use flowrig::rigid_solver::PoseRecord;
use serde::{Deserialize, Serialize};

use crate::config::Paths;
use crate::error::CliError;
use crate::output::OutputDir;

pub const SCENE_SCHEMA: &str = "flowrig.scene/1";

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.pgm")
}

pub fn flow_name(i: usize) -> String {
    format!("flow_{i:03}.flo")
}

/// Contents of `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Ground-truth object motion from frame 0 to frames 1.. in camera
    /// coordinates. For static scenes this is the apparent scene motion.
    pub object_motion: Vec<PoseRecord>,
    /// Camera pose at frames 1.. relative to frame 0.
    pub camera_motion: Vec<PoseRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expert_actions: Vec<NavAction>,
}

impl SceneMeta {
    pub fn object_poses(&self) -> Result<Vec<Pose>, CliError> {
        records_to_poses(&self.object_motion)
    }

    pub fn camera_poses(&self) -> Result<Vec<Pose>, CliError> {
        records_to_poses(&self.camera_motion)
    }
}

fn records_to_poses(r: &[PoseRecord]) -> Result<Vec<Pose>, CliError> {
    r.iter()
        .map(|p| Pose::try_from(p).map_err(|e| CliError::format(Path::new("scene.json"), e)))
        .collect()
}

/// Everything a fixture writes.
#[derive(Debug, Clone)]
pub struct FixtureData {
    pub meta: SceneMeta,
    pub depths: Vec<DepthImage>,
    pub flows: Vec<FlowField>,
    pub mask: MaskImage,
}

impl FixtureData {
    pub fn write(&self, out: &OutputDir) -> Result<(), CliError> {
        for (i, d) in self.depths.iter().enumerate() {
            out.write_bytes(&frame_name(i), &encode_depth_pgm(d))?;
        }
        for (i, f) in self.flows.iter().enumerate() {
            out.write_bytes(&flow_name(i), &encode_flow(f))?;
        }
        out.write_bytes("mask.pgm", &encode_mask_pgm(&self.mask))?;
        out.write_json("scene.json", &self.meta)?;
        Ok(())
    }
}

/// Inputs of a solve, plan or nav run with the files they came from.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthImage,
    pub depth_path: PathBuf,
    pub mask: Option<MaskImage>,
    pub mask_path: Option<PathBuf>,
    pub flows: Vec<FlowField>,
    pub flow_paths: Vec<PathBuf>,
    pub scene: Option<SceneMeta>,
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} file not found"))))
    }
}

pub fn read_scene(path: &Path) -> Result<SceneMeta, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| CliError::format(path, e))?;
    if meta.schema != SCENE_SCHEMA {
        return Err(CliError::format(path, format!("unsupported schema {:?}", meta.schema)));
    }
    Ok(meta)
}

fn fixture_flows(dir: &Path) -> Vec<PathBuf> {
    (0..).map(|i| dir.join(flow_name(i))).take_while(|p| p.is_file()).collect()
}

/// Resolves the configured paths, checks that every referenced file exists,
/// loads them and checks that their dimensions agree.
pub fn load_inputs(paths: &Paths, intrinsics: Option<CameraIntrinsics>, need_mask: bool) -> Result<Inputs, CliError> {
    let dir = paths.fixture.as_deref();
    let scene_path = dir.map(|d| d.join("scene.json"));
    let depth_path = match (&paths.depth, dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(frame_name(0)),
        (None, None) => return Err(CliError::Usage("no depth map given (use --fixture or --depth)".into())),
    };
    let mask_path = match (&paths.mask, dir) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(d)) if need_mask => Some(d.join("mask.pgm")),
        _ => None,
    };
    let flow_paths = match (paths.flows.is_empty(), dir) {
        (false, _) => paths.flows.clone(),
        (true, Some(d)) => fixture_flows(d),
        (true, None) => Vec::new(),
    };
    if flow_paths.is_empty() {
        return Err(CliError::Usage("no flow files given (use --fixture or --flow)".into()));
    }
    if need_mask && mask_path.is_none() {
        return Err(CliError::Usage("no mask given (use --fixture or --mask)".into()));
    }

    require(&depth_path, "depth")?;
    if let Some(m) = &mask_path {
        require(m, "mask")?;
    }
    for f in &flow_paths {
        require(f, "flow")?;
    }
    let scene = match &scene_path {
        Some(p) if p.is_file() => Some(read_scene(p)?),
        _ => None,
    };
    let intrinsics = intrinsics
        .or(scene.as_ref().map(|s| s.intrinsics))
        .ok_or_else(|| CliError::Usage("no intrinsics given (use --intrinsics or a fixture scene.json)".into()))?;

    let depth = read_depth_pgm(&depth_path).map_err(|e| CliError::from_flowio(&depth_path, e))?;
    let mask = match &mask_path {
        Some(p) => Some(read_mask_pgm(p).map_err(|e| CliError::from_flowio(p, e))?),
        None => None,
    };
    let flows = flow_paths
        .iter()
        .map(|p| read_flow(p).map_err(|e| CliError::from_flowio(p, e)))
        .collect::<Result<Vec<_>, _>>()?;

    let dims = depth.dims();
    let mismatch = |p: &Path, found: (usize, usize)| {
        CliError::Dimension(format!(
            "{} is {}x{} but depth {} is {}x{}",
            p.display(),
            found.0,
            found.1,
            depth_path.display(),
            dims.0,
            dims.1
        ))
    };
    if let (Some(m), Some(p)) = (&mask, &mask_path) {
        if m.dims() != dims {
            return Err(mismatch(p, m.dims()));
        }
    }
    for (f, p) in flows.iter().zip(&flow_paths) {
        if f.dims() != dims {
            return Err(mismatch(p, f.dims()));
        }
    }
    Ok(Inputs { intrinsics, depth, depth_path, mask, mask_path, flows, flow_paths, scene })
}
