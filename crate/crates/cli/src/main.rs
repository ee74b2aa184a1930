use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowrig::geometry::CameraIntrinsics;
use flowrig::manip_planner::InteractionMode;
use flowrig_cli::commands;
use flowrig_cli::config::{Mode, PipelineConfig};
use flowrig_cli::error::{exit, CliError};
use flowrig_cli::output::OutputDir;
use flowrig_cli::scenarios::{Scenario, ScenarioParams};

/// Rigid motion from dense flow: solving, planning, navigation, simulation
/// and diffusion sampling.
#[derive(Debug, Parser)]
#[command(name = "flowrig", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set solver.num_seeds=300`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "FLOWRIG_OUT", default_value = "flowrig-out")]
    out: PathBuf,
    /// Worker threads for episode batches.
    #[arg(long, global = true, env = "FLOWRIG_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args, Default)]
struct InputArgs {
    /// Fixture directory as written by `simulate`.
    #[arg(long, value_name = "DIR")]
    fixture: Option<PathBuf>,
    /// First depth map (16-bit PGM, millimetres).
    #[arg(long, value_name = "FILE")]
    depth: Option<PathBuf>,
    /// Object mask (8-bit PGM, nonzero = member).
    #[arg(long, value_name = "FILE")]
    mask: Option<PathBuf>,
    /// Flow file; repeat in frame order.
    #[arg(long = "flow", value_name = "FILE")]
    flows: Vec<PathBuf>,
    /// Pinhole intrinsics `fx,fy,cx,cy`.
    #[arg(long, value_name = "FX,FY,CX,CY", value_parser = parse_intrinsics)]
    intrinsics: Option<CameraIntrinsics>,
}

fn parse_intrinsics(s: &str) -> Result<CameraIntrinsics, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v[..] {
        [fx, fy, cx, cy] => CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| e.to_string()),
        _ => Err("expected four comma-separated numbers".into()),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Grasp,
    Push,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track and solve the object trajectory; writes tracks.json and trajectory.json.
    Solve {
        #[command(flatten)]
        input: InputArgs,
        /// Also report camera poses (inverse scene motion).
        #[arg(long)]
        camera: bool,
    },
    /// Full manipulation pipeline; writes plan.json and solve_report.json.
    Plan {
        #[command(flatten)]
        input: InputArgs,
        /// Force the interaction mode instead of deciding it.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Navigation actions from a fixture clip, or closed-loop episodes with --world.
    Nav {
        #[command(flatten)]
        input: InputArgs,
        /// Run closed-loop episodes in random rooms instead of reading a fixture.
        #[arg(long)]
        world: bool,
        #[arg(long)]
        episodes: Option<usize>,
        /// Print one action per line.
        #[arg(long)]
        follow: bool,
    },
    /// Write a synthetic fixture directory.
    Simulate {
        #[arg(long, value_enum)]
        scenario: Scenario,
        /// Lift height for the pick scenario (m).
        #[arg(long, default_value_t = 0.15)]
        lift: f64,
        /// Fraction of mask pixels given outlier flow in every frame.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        /// Maximum outlier displacement (px).
        #[arg(long, default_value_t = 20.0)]
        outlier_max_px: f64,
    },
    /// Sample the analytic Gaussian denoiser with DDPM and DDIM and summarize.
    DiffuseDemo {
        #[arg(long)]
        samples: Option<usize>,
        /// DDIM steps compared against the full chain.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render a plan over the first depth map as PPM (and SVG quiver).
    Viz {
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        svg: bool,
        /// Index of the current subgoal.
        #[arg(long)]
        current: Option<usize>,
    },
}

fn apply_inputs(cfg: &mut PipelineConfig, input: &InputArgs) {
    if input.fixture.is_some() {
        cfg.paths.fixture = input.fixture.clone();
    }
    if input.depth.is_some() {
        cfg.paths.depth = input.depth.clone();
    }
    if input.mask.is_some() {
        cfg.paths.mask = input.mask.clone();
    }
    if !input.flows.is_empty() {
        cfg.paths.flows = input.flows.clone();
    }
    if input.intrinsics.is_some() {
        cfg.intrinsics = input.intrinsics;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Some(Command::Solve { input, .. } | Command::Plan { input, .. }) => {
            cfg.mode = Mode::Manip;
            apply_inputs(&mut cfg, input);
        }
        Some(Command::Nav { input, episodes, .. }) => {
            cfg.mode = Mode::Nav;
            apply_inputs(&mut cfg, input);
            if let Some(n) = episodes {
                cfg.nav.episodes = *n;
            }
        }
        Some(Command::DiffuseDemo { samples, steps }) => {
            if let Some(n) = samples {
                cfg.diffusion.samples = *n;
            }
            if let Some(n) = steps {
                cfg.diffusion.ddim_steps = *n;
            }
        }
        Some(Command::Viz { input, current, .. }) => {
            apply_inputs(&mut cfg, input);
            if let Some(c) = current {
                cfg.viz.current = *c;
            }
        }
        Some(Command::Simulate { .. }) | None => {}
    }
    cfg.validate()?;
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    cfg.paths.output = Some(cli.out.clone());

    let mut stdout = io::stdout().lock();
    let mut say = |line: &str| {
        let _ = writeln!(stdout, "{line}");
    };
    let Some(command) = cli.command else {
        if cli.print_config {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        return Err(CliError::Usage("no subcommand given; see --help".into()));
    };
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = OutputDir::create(&cli.out)?;
    match command {
        Command::Solve { camera, .. } => say(&commands::solve(&cfg, &out, camera)?),
        Command::Plan { mode, .. } => {
            let mode = mode.map(|m| match m {
                ModeArg::Grasp => InteractionMode::Grasp,
                ModeArg::Push => InteractionMode::Push,
            });
            say(&commands::plan(&cfg, &out, mode)?);
        }
        Command::Nav { world: true, .. } => {
            let r = commands::nav_world(&cfg, &out, cfg.nav.episodes, cli.workers)?;
            for e in &r.episodes {
                say(&format!(
                    "seed {}: {} after {} steps, {:.2} m from target",
                    e.seed,
                    if e.success { "success" } else { "failure" },
                    e.steps,
                    e.final_distance
                ));
            }
            say(&format!("{}/{} episodes succeeded", r.successes, r.episodes.len()));
        }
        Command::Nav { follow, .. } => {
            let ep = commands::nav_fixture(&cfg, &out, follow, &mut io::stdout())?;
            if !follow {
                say(&ep.labels().join(" "));
            }
        }
        Command::Simulate { scenario, lift, outliers, outlier_max_px } => {
            let params = ScenarioParams { seed: cfg.seed, lift, outliers, outlier_max_px };
            say(&commands::simulate(&cfg, &out, scenario, &params)?);
        }
        Command::DiffuseDemo { .. } => {
            let r = commands::diffuse_demo(&cfg, &out)?;
            say(&format!(
                "DDPM: mean {:.5} ({:+.2} SE), variance ratio {:.4} over {} samples",
                r.ddpm.mean, r.ddpm_mean_z, r.ddpm_variance_ratio, r.samples
            ));
            say(&format!(
                "DDIM {} vs {} steps: relative difference {:.3e}, means {:.5} / {:.5}",
                r.ddim_steps,
                cfg.diffusion.timesteps,
                r.ddim_relative_difference,
                r.ddim.mean,
                r.ddim_full.mean
            ));
            say(&format!("clip frames: {:?}", r.clip_frame_plan));
        }
        Command::Viz { plan, svg, .. } => say(&commands::visualize(&cfg, &out, &plan, svg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("flowrig: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
