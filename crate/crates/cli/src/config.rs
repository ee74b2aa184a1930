//! Declarative pipeline configuration with dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use flowrig::diffusion::{
    PosteriorVariance, COSINE_OFFSET, DEFAULT_CLIP_FRAMES, DEFAULT_EMA_DECAY, DEFAULT_EMA_UPDATE_EVERY, DEFAULT_MIN_SNR_GAMMA,
    DEFAULT_TIMESTEPS,
};
use flowrig::geometry::CameraIntrinsics;
use flowrig::manip_planner::PlannerConfig;
use flowrig::nav_mapper::NavThresholds;
use flowrig::rigid_solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The defaults as shipped; `flowrig --print-config` reproduces this file.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Manip,
    Nav,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory in the layout written by `simulate`; individual paths below
    /// override its members.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    pub flows: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Not echoed: the echo is written inside it.
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavSettings {
    pub thresholds: NavThresholds,
    /// Frames per generated clip in closed-loop mode.
    pub clip_frames: usize,
    pub max_steps: usize,
    pub episodes: usize,
    pub solver: SolverConfig,
}

impl Default for NavSettings {
    fn default() -> Self {
        Self {
            thresholds: NavThresholds::default(),
            clip_frames: DEFAULT_CLIP_FRAMES,
            max_steps: 200,
            episodes: 50,
            solver: SolverConfig::navigation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub timesteps: usize,
    pub cosine_offset: f64,
    pub clip_frames: usize,
    pub min_snr_gamma: f64,
    pub ema_decay: f64,
    pub ema_update_every: usize,
    pub ddim_steps: usize,
    pub samples: usize,
    pub data_mean: f64,
    pub data_std: f64,
    pub variance: PosteriorVariance,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            cosine_offset: COSINE_OFFSET,
            clip_frames: DEFAULT_CLIP_FRAMES,
            min_snr_gamma: DEFAULT_MIN_SNR_GAMMA,
            ema_decay: DEFAULT_EMA_DECAY,
            ema_update_every: DEFAULT_EMA_UPDATE_EVERY,
            ddim_steps: 10,
            samples: 10_000,
            data_mean: 0.5,
            data_std: 1.0,
            variance: PosteriorVariance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSettings {
    /// Quiver arrow spacing in pixels.
    pub quiver_stride: usize,
    pub marker_radius: usize,
    /// Index of the subgoal drawn as current; later ones are drawn as next.
    pub current: usize,
}

impl Default for VizSettings {
    fn default() -> Self {
        Self { quiver_stride: 8, marker_radius: 2, current: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    pub paths: Paths,
    pub solver: SolverConfig,
    pub planner: PlannerConfig,
    pub nav: NavSettings,
    pub diffusion: DiffusionSettings,
    pub viz: VizSettings,
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("config: {name} must be positive, got {v}")))
    }
}

impl PipelineConfig {
    /// Defaults, then `file`, then each `key=value` override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        positive("solver.replan_ratio", self.solver.replan_ratio)?;
        positive("solver.ransac.tolerance_px", self.solver.ransac.tolerance_px)?;
        positive("planner.lift_threshold_m", self.planner.lift_threshold_m)?;
        positive("planner.push_standoff_m", self.planner.push_standoff_m)?;
        positive("planner.replan_min_motion_m", self.planner.replan_min_motion_m)?;
        positive("nav.thresholds.probe_distance", self.nav.thresholds.probe_distance)?;
        positive("nav.thresholds.done_eps", self.nav.thresholds.done_eps)?;
        positive("nav.thresholds.forward_max_lateral", self.nav.thresholds.forward_max_lateral)?;
        positive("nav.thresholds.motion_threshold", self.nav.thresholds.motion_threshold)?;
        positive("nav.solver.replan_ratio", self.nav.solver.replan_ratio)?;
        positive("diffusion.min_snr_gamma", self.diffusion.min_snr_gamma)?;
        positive("diffusion.data_std", self.diffusion.data_std)?;
        for (name, v) in [
            ("solver.num_seeds", self.solver.num_seeds),
            ("nav.solver.num_seeds", self.nav.solver.num_seeds),
            ("planner.contact_samples", self.planner.contact_samples),
            ("planner.replan_window", self.planner.replan_window),
            ("nav.clip_frames", self.nav.clip_frames),
            ("diffusion.timesteps", self.diffusion.timesteps),
            ("diffusion.ddim_steps", self.diffusion.ddim_steps),
            ("diffusion.samples", self.diffusion.samples),
            ("viz.quiver_stride", self.viz.quiver_stride),
        ] {
            if v == 0 {
                return Err(CliError::Usage(format!("config: {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.diffusion.ema_decay) {
            return Err(CliError::Usage("config: diffusion.ema_decay must lie in [0, 1)".into()));
        }
        if let Some(k) = &self.intrinsics {
            k.validate().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for numbers, booleans and arrays; anything else is a bare string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` assignment.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override {assignment:?} has an empty key")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {assignment:?}: {p} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}
