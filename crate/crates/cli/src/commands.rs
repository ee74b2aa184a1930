use std::fs;
use std::io::Write;
use std::path::Path;

use flowrig::diffusion::{
    adaptive_frames, sample_ddim, sample_ddpm, DiffusionSchedule, GaussianOracle, PredictionKind,
};
use flowrig::geometry::Pose;
use flowrig::manip_planner::{plan_manipulation, InteractionMode, SubgoalPlan, PLAN_SCHEMA};
use flowrig::nav_mapper::{run_nav_episode, NavAction, NavEpisode};
use flowrig::rigid_solver::{camera_from_scene, prepare_tracks, solve_tracks, PoseRecord, SolveReport, Trajectory};
use flowrig::simulator::{run_closed_loop, NavWorld};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::fixture::{load_inputs, Inputs};
use crate::output::OutputDir;
use crate::scenarios::{build, Scenario, ScenarioParams};
use crate::viz;

pub const TRAJECTORY_SCHEMA: &str = "flowrig.trajectory/1";
pub const ACTIONS_SCHEMA: &str = "flowrig.actions/1";
pub const NAV_WORLD_SCHEMA: &str = "flowrig.nav_world/1";
pub const DIFFUSION_SCHEMA: &str = "flowrig.diffusion_demo/1";
pub const SCHEDULE_SCHEMA: &str = "flowrig.schedule/1";

/// Writes the effective configuration next to the run's outputs.
pub fn echo_config(out: &OutputDir, cfg: &PipelineConfig) -> Result<(), CliError> {
    out.write_bytes("config.toml", cfg.to_toml().as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PoseError {
    pub rotation_rad: f64,
    pub translation_m: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReplanRecord {
    pub frame: usize,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct TrajectoryReport<'a> {
    pub schema: &'static str,
    pub num_seeds: usize,
    pub active_counts: &'a [usize],
    pub poses: Vec<PoseRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera_poses: Option<Vec<PoseRecord>>,
    pub increments: &'a [SolveReport],
    pub replan: Option<ReplanRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth_error: Option<Vec<PoseError>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint_error_m: Option<f64>,
}

fn pose_errors(solved: &[Pose], truth: &[Pose]) -> Vec<PoseError> {
    solved
        .iter()
        .zip(truth)
        .map(|(a, b)| PoseError { rotation_rad: a.rotation_distance(b), translation_m: a.translation_distance(b) })
        .collect()
}

fn report<'a>(traj: &'a Trajectory, inputs: &Inputs, camera: bool, replan: Option<(usize, f64)>) -> Result<TrajectoryReport<'a>, CliError> {
    let truth = match &inputs.scene {
        Some(s) => Some(s.object_poses()?),
        None => None,
    };
    Ok(TrajectoryReport {
        schema: TRAJECTORY_SCHEMA,
        num_seeds: traj.num_seeds,
        active_counts: &traj.active_counts,
        poses: traj.poses.iter().map(PoseRecord::from).collect(),
        camera_poses: camera.then(|| traj.poses.iter().map(|p| PoseRecord::from(&camera_from_scene(p))).collect()),
        increments: &traj.increments,
        replan: replan.map(|(frame, ratio)| ReplanRecord { frame, ratio }),
        ground_truth_error: truth.map(|t| pose_errors(&traj.poses, &t)),
        endpoint_error_m: None,
    })
}

/// Tracks, solves and writes `tracks.json` and `trajectory.json`. A
/// tracking collapse is written to the report and then returned as an error.
pub fn solve(cfg: &PipelineConfig, out: &OutputDir, camera: bool) -> Result<String, CliError> {
    let inputs = load_inputs(&cfg.paths, cfg.intrinsics, true)?;
    let mask = inputs.mask.as_ref().expect("mask requested");
    let (points0, tracks) = prepare_tracks(&inputs.intrinsics, &inputs.depth, mask, &inputs.flows, &cfg.solver, cfg.seed)?;
    let (traj, replan) = solve_tracks(&inputs.intrinsics, &points0, &tracks, &cfg.solver, cfg.seed)?;
    echo_config(out, cfg)?;
    out.write_json("tracks.json", &tracks)?;
    let rep = report(&traj, &inputs, camera, replan)?;
    out.write_json("trajectory.json", &rep)?;
    if let Some((frame, ratio)) = replan {
        return Err(CliError::ReplanNeeded { frame, ratio });
    }
    let mut summary = format!("solved {} frames from {} tracks", traj.poses.len(), traj.num_seeds);
    if let Some(e) = rep.ground_truth_error.as_ref().and_then(|e| e.last()) {
        summary += &format!("; final error {:.3e} rad, {:.3e} m", e.rotation_rad, e.translation_m);
    }
    Ok(summary)
}

/// Runs the manipulation pipeline and writes `plan.json` and `solve_report.json`.
pub fn plan(cfg: &PipelineConfig, out: &OutputDir, mode: Option<InteractionMode>) -> Result<String, CliError> {
    let inputs = load_inputs(&cfg.paths, cfg.intrinsics, true)?;
    let mask = inputs.mask.as_ref().expect("mask requested");
    let (plan, traj) =
        plan_manipulation(&inputs.intrinsics, &inputs.depth, mask, &inputs.flows, &cfg.solver, &cfg.planner, cfg.seed, mode)?;
    let mut rep = report(&traj, &inputs, false, None)?;
    if let Some(scene) = &inputs.scene {
        let truth = scene.object_poses()?;
        let end = traj.poses.len().checked_sub(1).and_then(|i| truth.get(i));
        if let (Some(end), Some(goal)) = (end, plan.subgoal_points().last()) {
            rep.endpoint_error_m = Some((end.apply(&plan.contact_point()) - goal).norm());
        }
    }
    echo_config(out, cfg)?;
    out.write_json("plan.json", &plan)?;
    out.write_json("solve_report.json", &rep)?;
    let mut summary = format!(
        "mode {} with {} subgoals",
        serde_json::to_value(plan.mode).expect("mode serializes").as_str().unwrap_or("?"),
        plan.subgoals.len()
    );
    if let Some(e) = rep.endpoint_error_m {
        summary += &format!("; endpoint error {e:.3e} m");
    }
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct ActionsReport<'a> {
    pub schema: &'static str,
    /// Action names, ending in "ReplanNeeded" when tracking collapsed.
    pub actions: &'a NavEpisode,
    pub replan: Option<ReplanRecord>,
}

/// Maps a fixture clip to actions and writes `actions.json`. With `follow`,
/// each label is also written to `stream` as it is produced.
pub fn nav_fixture(cfg: &PipelineConfig, out: &OutputDir, follow: bool, stream: &mut dyn Write) -> Result<NavEpisode, CliError> {
    let inputs = load_inputs(&cfg.paths, cfg.intrinsics, false)?;
    let ep = run_nav_episode(&inputs.flows, &inputs.depth, &inputs.intrinsics, &cfg.nav.thresholds, &cfg.nav.solver, cfg.seed)?;
    echo_config(out, cfg)?;
    out.write_json(
        "actions.json",
        &ActionsReport { schema: ACTIONS_SCHEMA, actions: &ep, replan: ep.replan.map(|(frame, ratio)| ReplanRecord { frame, ratio }) },
    )?;
    if follow {
        for l in ep.labels() {
            writeln!(stream, "{l}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        }
    }
    if let Some((frame, ratio)) = ep.replan {
        return Err(CliError::ReplanNeeded { frame, ratio });
    }
    Ok(ep)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub success: bool,
    pub reached_done: bool,
    pub final_distance: f64,
    pub steps: usize,
    pub clips: usize,
    pub replans: usize,
    pub actions: Vec<NavAction>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorldReport {
    pub schema: &'static str,
    pub success_radius: f64,
    pub episodes: Vec<EpisodeRecord>,
    pub successes: usize,
    pub success_rate: f64,
}

/// Closed-loop episodes in random rooms, seeded `seed, seed + 1, ...`.
pub fn nav_world(cfg: &PipelineConfig, out: &OutputDir, episodes: usize, workers: usize) -> Result<WorldReport, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let results: Vec<Result<EpisodeRecord, CliError>> = pool.install(|| {
        (0..episodes as u64)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.seed.wrapping_add(i);
                let mut world = NavWorld::random(seed);
                let r = run_closed_loop(&mut world, cfg.nav.clip_frames, cfg.nav.max_steps, &cfg.nav.thresholds, &cfg.nav.solver, seed)?;
                Ok(EpisodeRecord {
                    seed,
                    success: r.success,
                    reached_done: r.reached_done,
                    final_distance: r.final_distance,
                    steps: r.actions.len(),
                    clips: r.clips,
                    replans: r.replans,
                    actions: r.actions,
                })
            })
            .collect()
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let successes = episodes.iter().filter(|e| e.success).count();
    let report = WorldReport {
        schema: NAV_WORLD_SCHEMA,
        success_radius: NavWorld::random(cfg.seed).success_radius,
        success_rate: successes as f64 / episodes.len().max(1) as f64,
        successes,
        episodes,
    };
    echo_config(out, cfg)?;
    out.write_json("episodes.json", &report)?;
    Ok(report)
}

pub fn simulate(cfg: &PipelineConfig, out: &OutputDir, scenario: Scenario, params: &ScenarioParams) -> Result<String, CliError> {
    let data = build(scenario, params)?;
    data.write(out)?;
    echo_config(out, cfg)?;
    Ok(format!(
        "{}: {} frames at {}x{} written to {}",
        data.meta.scenario,
        data.meta.frames,
        data.meta.width,
        data.meta.height,
        out.root().display()
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SampleStats {
    pub mean: f64,
    pub variance: f64,
}

impl SampleStats {
    fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let variance = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, variance }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffusionReport {
    pub schema: &'static str,
    pub samples: usize,
    pub data_mean: f64,
    pub data_variance: f64,
    pub ddpm: SampleStats,
    /// Distance of the DDPM mean from the data mean in standard errors.
    pub ddpm_mean_z: f64,
    pub ddpm_variance_ratio: f64,
    pub ddim_steps: usize,
    pub ddim: SampleStats,
    pub ddim_full: SampleStats,
    /// `|ddim - ddim_full| / |ddim_full|` over all samples.
    pub ddim_relative_difference: f64,
    pub clip_frame_plan: Vec<usize>,
}

/// Gaussian-oracle sampling experiment; writes `diffusion.json` and `schedule.json`.
pub fn diffuse_demo(cfg: &PipelineConfig, out: &OutputDir) -> Result<DiffusionReport, CliError> {
    let d = &cfg.diffusion;
    let sched = DiffusionSchedule::cosine(d.timesteps, d.cosine_offset)?;
    let oracle = GaussianOracle::new(d.data_mean, d.data_std, PredictionKind::Velocity, sched.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_last: Vec<f64> = (0..d.samples).map(|_| rng.sample(StandardNormal)).collect();
    let ddpm = SampleStats::of(&sample_ddpm(&x_last, &oracle, &sched, d.variance, &mut rng)?);
    let fast = sample_ddim(&x_last, d.ddim_steps, &oracle, &sched)?;
    let full = sample_ddim(&x_last, d.timesteps, &oracle, &sched)?;
    let diff = fast.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = full.iter().map(|b| b * b).sum::<f64>().sqrt();
    let data_variance = d.data_std * d.data_std;
    let report = DiffusionReport {
        schema: DIFFUSION_SCHEMA,
        samples: d.samples,
        data_mean: d.data_mean,
        data_variance,
        ddpm_mean_z: (ddpm.mean - d.data_mean) / (data_variance / d.samples as f64).sqrt(),
        ddpm_variance_ratio: ddpm.variance / data_variance,
        ddpm,
        ddim_steps: d.ddim_steps,
        ddim: SampleStats::of(&fast),
        ddim_full: SampleStats::of(&full),
        ddim_relative_difference: diff / norm,
        clip_frame_plan: adaptive_frames(d.timesteps, 0, d.clip_frames)?.indices,
    };
    #[derive(Serialize)]
    struct ScheduleFile<'a> {
        schema: &'static str,
        #[serde(flatten)]
        schedule: &'a DiffusionSchedule,
    }
    echo_config(out, cfg)?;
    out.write_json("schedule.json", &ScheduleFile { schema: SCHEDULE_SCHEMA, schedule: &sched })?;
    out.write_json("diffusion.json", &report)?;
    Ok(report)
}

/// Draws `plan` over the first depth map; writes `viz.ppm` and optionally `quiver.svg`.
pub fn visualize(cfg: &PipelineConfig, out: &OutputDir, plan_path: &Path, svg: bool) -> Result<String, CliError> {
    let text = fs::read_to_string(plan_path).map_err(|e| CliError::io(plan_path, e))?;
    let plan: SubgoalPlan = serde_json::from_str(&text).map_err(|e| CliError::format(plan_path, e))?;
    if plan.schema != PLAN_SCHEMA {
        return Err(CliError::format(plan_path, format!("unsupported schema {:?}", plan.schema)));
    }
    let inputs = load_inputs(&cfg.paths, cfg.intrinsics, false).or_else(|e| match e {
        // A depth map alone is enough for a plan without quiver.
        CliError::Usage(_) if cfg.paths.depth.is_some() || cfg.paths.fixture.is_some() => load_depth_only(cfg),
        other => Err(other),
    })?;
    let flow = inputs.flows.first();
    let canvas = viz::render(&inputs.depth, &inputs.intrinsics, &plan, flow, &cfg.viz);
    echo_config(out, cfg)?;
    out.write_bytes("viz.ppm", &canvas.to_ppm())?;
    if svg {
        let s = viz::render_svg(&inputs.intrinsics, canvas.width, canvas.height, &plan, flow, &cfg.viz);
        out.write_bytes("quiver.svg", s.as_bytes())?;
    }
    Ok(format!("{} subgoals drawn over {}", plan.subgoals.len(), inputs.depth_path.display()))
}

fn load_depth_only(cfg: &PipelineConfig) -> Result<Inputs, CliError> {
    let depth_path = match (&cfg.paths.depth, &cfg.paths.fixture) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(crate::fixture::frame_name(0)),
        (None, None) => unreachable!("checked by caller"),
    };
    let scene = match &cfg.paths.fixture {
        Some(d) if d.join("scene.json").is_file() => Some(crate::fixture::read_scene(&d.join("scene.json"))?),
        _ => None,
    };
    let intrinsics = cfg
        .intrinsics
        .or(scene.as_ref().map(|s| s.intrinsics))
        .ok_or_else(|| CliError::Usage("no intrinsics given (use --intrinsics or a fixture scene.json)".into()))?;
    let depth = flowrig::flowio::read_depth_pgm(&depth_path).map_err(|e| CliError::from_flowio(&depth_path, e))?;
    Ok(Inputs { intrinsics, depth, depth_path, mask: None, mask_path: None, flows: vec![], flow_paths: vec![], scene })
}
