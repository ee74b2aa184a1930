use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn flowrig(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowrig"))
        .current_dir(dir)
        .env_remove("FLOWRIG_OUT")
        .env_remove("FLOWRIG_WORKERS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = flowrig(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn simulate(dir: &Path, scenario: &str) -> PathBuf {
    let name = format!("fx-{scenario}");
    ok(dir, &["simulate", "--scenario", scenario, "--out", &name]);
    dir.join(name)
}

#[test]
fn printed_config_matches_checked_in_default() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(dir.path(), &["--print-config"]);
    let reference = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/config/default.toml")).unwrap();
    assert_eq!(printed, reference);
}

#[test]
fn config_file_then_set_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "seed = 3\n[solver]\nnum_seeds = 100\n[planner]\nlift_threshold_m = 0.2\n").unwrap();
    let printed = ok(dir.path(), &["--config", "c.toml", "--set", "solver.num_seeds=200", "--seed", "9", "--print-config"]);
    let v: toml::Table = printed.parse().unwrap();
    assert_eq!(v["seed"].as_integer(), Some(9));
    assert_eq!(v["solver"]["num_seeds"].as_integer(), Some(200));
    assert_eq!(v["planner"]["lift_threshold_m"].as_float(), Some(0.2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&flowrig(dir.path(), &["--set", "solver.num_seeds=0", "--print-config"])), 2);
    assert_eq!(code(&flowrig(dir.path(), &["--set", "nope=1", "--print-config"])), 2);
    assert_eq!(code(&flowrig(dir.path(), &["simulate", "--scenario", "bogus"])), 2);
    assert_eq!(code(&flowrig(dir.path(), &["plan"])), 2);
    assert_eq!(code(&flowrig(dir.path(), &[])), 2);
}

#[test]
fn pick_fixture_plans_a_grasp() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "pick");
    ok(dir.path(), &["plan", "--fixture", "fx-pick", "--out", "plan"]);
    let plan = json(dir.path().join("plan/plan.json"));
    assert_eq!(plan["schema"], "flowrig.plan/1");
    assert_eq!(plan["mode"], "grasp");
    assert!(plan.get("approach").is_none());
    assert_eq!(plan["subgoals"].as_array().unwrap().len(), 7);
    let report = json(dir.path().join("plan/solve_report.json"));
    assert!(report["endpoint_error_m"].as_f64().unwrap() < 1e-3);
    assert!(dir.path().join("plan/config.toml").is_file());
}

#[test]
fn push_fixture_plans_a_push() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "push");
    ok(dir.path(), &["plan", "--fixture", "fx-push", "--out", "plan"]);
    let plan = json(dir.path().join("plan/plan.json"));
    assert_eq!(plan["mode"], "push");
    let v = |x: &Value| -> [f64; 3] { [x[0].as_f64().unwrap(), x[1].as_f64().unwrap(), x[2].as_f64().unwrap()] };
    let (c, a, s) = (v(&plan["contact"]), v(&plan["approach"]), v(&plan["subgoals"][0]));
    let d: f64 = (0..3).map(|i| (c[i] - a[i]).powi(2)).sum::<f64>().sqrt();
    assert!((d - 0.10).abs() < 1e-9);
    let along: f64 = (0..3).map(|i| (c[i] - a[i]) * (s[i] - c[i])).sum::<f64>();
    let sn: f64 = (0..3).map(|i| (s[i] - c[i]).powi(2)).sum::<f64>().sqrt();
    assert!((along / (d * sn) - 1.0).abs() < 1e-9);
}

#[test]
fn forced_mode_overrides_decision() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "pick");
    ok(dir.path(), &["plan", "--fixture", "fx-pick", "--mode", "push", "--out", "plan"]);
    assert_eq!(json(dir.path().join("plan/plan.json"))["mode"], "push");
}

#[test]
fn missing_mask_is_an_io_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let fx = simulate(dir.path(), "pick");
    fs::remove_file(fx.join("mask.pgm")).unwrap();
    let out = flowrig(dir.path(), &["plan", "--fixture", "fx-pick", "--out", "plan"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask.pgm"));
    assert!(!dir.path().join("plan/plan.json").exists());
}

#[test]
fn corrupt_flow_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = simulate(dir.path(), "push");
    fs::write(fx.join("flow_002.flo"), b"not a flow file at all").unwrap();
    let out = flowrig(dir.path(), &["solve", "--fixture", "fx-push"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("flow_002.flo"));
}

#[test]
fn mismatched_dimensions_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "push");
    simulate(dir.path(), "duality");
    let out = flowrig(dir.path(), &["solve", "--fixture", "fx-push", "--flow", "fx-duality/flow_000.flo"]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fx-duality/flow_000.flo"));
}

#[test]
fn empty_mask_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let fx = simulate(dir.path(), "push");
    let mut bytes = fs::read(fx.join("mask.pgm")).unwrap();
    let n = bytes.len();
    bytes[n - 160 * 120..].fill(0);
    fs::write(fx.join("mask.pgm"), bytes).unwrap();
    assert_eq!(code(&flowrig(dir.path(), &["plan", "--fixture", "fx-push"])), 6);
}

#[test]
fn track_loss_requests_replanning() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "track-loss");
    let out = flowrig(dir.path(), &["solve", "--fixture", "fx-track-loss", "--out", "s"]);
    assert_eq!(code(&out), 8);
    let t = json(dir.path().join("s/trajectory.json"));
    assert!(t["replan"]["ratio"].as_f64().unwrap() < 0.10);
    assert_eq!(code(&flowrig(dir.path(), &["plan", "--fixture", "fx-track-loss"])), 8);
}

#[test]
fn duality_fixture_reports_camera_motion() {
    let dir = tempfile::tempdir().unwrap();
    let fx = simulate(dir.path(), "duality");
    ok(dir.path(), &["solve", "--fixture", "fx-duality", "--camera", "--out", "s"]);
    let t = json(dir.path().join("s/trajectory.json"));
    let truth = json(fx.join("scene.json"))["camera_motion"][0]["translation"].clone();
    let got = &t["camera_poses"][0]["translation"];
    for i in 0..3 {
        // Depth in the fixture is quantized to whole millimetres.
        assert!((got[i].as_f64().unwrap() - truth[i].as_f64().unwrap()).abs() < 1e-4);
    }
}

#[test]
fn nav_fixtures_map_to_actions() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "zero");
    simulate(dir.path(), "nav-forward");
    simulate(dir.path(), "nav-spin");
    assert_eq!(ok(dir.path(), &["nav", "--fixture", "fx-zero", "--follow", "--out", "z"]), "Done\n");
    assert_eq!(json(dir.path().join("z/actions.json"))["actions"], serde_json::json!(["Done"]));
    assert_eq!(
        ok(dir.path(), &["nav", "--fixture", "fx-nav-forward", "--follow", "--out", "f"]),
        "MoveForward\nMoveForward\nMoveForward\nDone\n"
    );
    let out = flowrig(dir.path(), &["nav", "--fixture", "fx-nav-spin", "--out", "s"]);
    assert_eq!(code(&out), 8);
    let actions = json(dir.path().join("s/actions.json"))["actions"].clone();
    assert_eq!(actions.as_array().unwrap().last().unwrap(), "ReplanNeeded");
}

#[test]
fn world_mode_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let one = ok(dir.path(), &["nav", "--world", "--episodes", "4", "--workers", "1", "--out", "w1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_flowrig"))
        .current_dir(dir.path())
        .env("FLOWRIG_WORKERS", "3")
        .env("FLOWRIG_OUT", "w3")
        .args(["nav", "--world", "--episodes", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), one);
    assert_eq!(files(&dir.path().join("w1")), files(&dir.path().join("w3")));
    let r = json(dir.path().join("w1/episodes.json"));
    assert_eq!(r["schema"], "flowrig.nav_world/1");
    assert_eq!(r["episodes"].as_array().unwrap().len(), 4);
}

#[test]
fn diffuse_demo_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["diffuse-demo", "--samples", "2000", "--out", "d"]);
    assert!(stdout.contains("DDPM"));
    let r = json(dir.path().join("d/diffusion.json"));
    assert_eq!(r["schema"], "flowrig.diffusion_demo/1");
    assert!(r["ddpm_mean_z"].as_f64().unwrap().abs() < 4.0);
    assert_eq!(r["clip_frame_plan"], serde_json::json!([0, 14, 28, 42, 57, 71, 85, 99]));
    let s = json(dir.path().join("d/schedule.json"));
    assert_eq!(s["betas"].as_array().unwrap().len(), 100);
}

#[test]
fn viz_writes_ppm_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "pick");
    ok(dir.path(), &["plan", "--fixture", "fx-pick", "--out", "p"]);
    ok(dir.path(), &["viz", "--plan", "p/plan.json", "--fixture", "fx-pick", "--svg", "--out", "v"]);
    let ppm = fs::read(dir.path().join("v/viz.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n160 120\n255\n"));
    assert!(fs::read_to_string(dir.path().join("v/quiver.svg")).unwrap().contains("<circle"));
    ok(dir.path(), &["viz", "--plan", "p/plan.json", "--depth", "fx-pick/frame_000.pgm", "--intrinsics", "150,150,79.5,59.5", "--out", "v2"]);
    assert!(dir.path().join("v2/viz.ppm").is_file());
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "pick");
    simulate(d, "nav-forward");
    let runs: Vec<Vec<&str>> = vec![
        vec!["simulate", "--scenario", "random", "--seed", "5", "--outliers", "0.2"],
        vec!["simulate", "--scenario", "nav-expert", "--seed", "5"],
        vec!["solve", "--fixture", "fx-pick"],
        vec!["plan", "--fixture", "fx-pick"],
        vec!["nav", "--fixture", "fx-nav-forward"],
        vec!["nav", "--world", "--episodes", "2", "--workers", "2", "--seed", "11"],
        vec!["diffuse-demo", "--samples", "500"],
        vec!["viz", "--plan", "a0/plan.json", "--fixture", "fx-pick", "--svg"],
    ];
    // The plan feeding viz comes from the first plan run.
    ok(d, &["plan", "--fixture", "fx-pick", "--out", "a0"]);
    for (i, args) in runs.iter().enumerate() {
        let (a, b) = (format!("r{i}a"), format!("r{i}b"));
        let mut first = args.clone();
        first.extend(["--out", &a]);
        let mut second = args.clone();
        second.extend(["--out", &b]);
        let (sa, sb) = (ok(d, &first), ok(d, &second));
        assert_eq!(files(&d.join(&a)), files(&d.join(&b)), "{args:?}");
        assert_eq!(sa.replace(&a, ""), sb.replace(&b, ""), "{args:?}");
    }
}
