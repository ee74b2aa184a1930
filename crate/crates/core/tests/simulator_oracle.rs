use std::f64::consts::PI;

use flowrig::flowio::{MaskImage, DEFAULT_MOTION_THRESHOLD};
use flowrig::geometry::{Pixel, Pose};
use flowrig::manip_planner::{plan_manipulation, InteractionMode, PlannerConfig};
use flowrig::nav_mapper::{run_nav_episode, NavAction, NavThresholds};
use flowrig::rigid_solver::{camera_from_scene, solve_trajectory, SolverConfig, SolverError};
use flowrig::simulator::*;
use nalgebra::Vector3;

fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    (a.rotation_distance(b), a.translation_distance(b))
}

#[test]
fn rendered_flow_matches_projection() {
    for seed in 0..5 {
        let s = random_rigid_scene(seed, 0.5, 0.5);
        let r = s.render(0).unwrap();
        let flow = s.render_flow(0, 1).unwrap();
        let motion = s.object_motion(0, 1);
        let k = s.intrinsics;
        let mut checked = 0;
        for y in 0..s.height {
            for x in 0..s.width {
                let Some(owner) = r.owner(x, y) else {
                    assert_eq!(flow.get(x, y), (0.0, 0.0));
                    continue;
                };
                let Some(Some((du, dv))) = s.pixel_flow(&r, x, y, 0, 1) else { continue };
                assert_eq!(flow.get(x, y), (du as f32, dv as f32));
                if owner.object != 0 {
                    continue;
                }
                let p0 = k.backproject(&Pixel::new(x as f64, y as f64), r.depth.get(x, y)).unwrap();
                let (p1, _) = k.project(&motion.apply(&p0)).unwrap();
                assert!((p1.u - x as f64 - du).abs() < 1e-9);
                assert!((p1.v - y as f64 - dv).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 500);
    }
}

#[test]
fn single_step_solves_are_exact() {
    let cfg = SolverConfig::default();
    for seed in 0..25 {
        let s = random_rigid_scene(seed, 30f64.to_radians(), 0.5);
        let traj = solve_trajectory(
            &s.intrinsics,
            &s.render_depth(0).unwrap(),
            &s.render_mask(0, 0).unwrap(),
            &s.render_flows().unwrap(),
            &cfg,
            seed,
        )
        .unwrap();
        let (r, t) = pose_error(&traj.poses[0], &s.object_motion(0, 1));
        assert!(r < 1e-5 && t < 1e-5, "seed {seed}: {r} {t}");
    }
}

#[test]
fn whole_pixel_translations_are_exact_over_many_frames() {
    let s = translate_scene(Vector3::new(0.02, -0.01, 0.0), 8);
    let traj = solve_trajectory(
        &s.intrinsics,
        &s.render_depth(0).unwrap(),
        &s.render_mask(0, 0).unwrap(),
        &s.render_flows().unwrap(),
        &SolverConfig::default(),
        3,
    )
    .unwrap();
    assert_eq!(traj.poses.len(), 7);
    for (t, pose) in traj.poses.iter().enumerate() {
        let (r, e) = pose_error(pose, &s.object_motion(0, t + 1));
        assert!(r < 1e-9 && e < 1e-9, "frame {}: {r} {e}", t + 1);
    }
}

#[test]
fn camera_motion_is_inverse_scene_motion() {
    let cfg = SolverConfig::default();
    for seed in 0..10 {
        let s = random_camera_scene(seed, 30f64.to_radians(), 0.5);
        let mask = MaskImage::full(s.width, s.height);
        let traj = solve_trajectory(&s.intrinsics, &s.render_depth(0).unwrap(), &mask, &s.render_flows().unwrap(), &cfg, seed).unwrap();
        let (r, t) = pose_error(&camera_from_scene(&traj.poses[0]), &s.camera_motion(1));
        assert!(r < 1e-5 && t < 1e-5, "seed {seed}: {r} {t}");
    }
}

#[test]
fn track_loss_requests_replan() {
    let s = track_loss_scene();
    let err = solve_trajectory(
        &s.intrinsics,
        &s.render_depth(0).unwrap(),
        &s.render_mask(0, 0).unwrap(),
        &s.render_flows().unwrap(),
        &SolverConfig::default(),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, SolverError::ReplanNeeded { ratio, .. } if ratio < 0.10));
}

#[test]
fn planner_fixtures() {
    let cfg = SolverConfig::default();
    let pc = PlannerConfig::default();
    let pick = pick_and_place_scene(0.15);
    let (plan, _) = plan_manipulation(
        &pick.intrinsics,
        &pick.render_depth(0).unwrap(),
        &pick.render_mask(0, 0).unwrap(),
        &pick.render_flows().unwrap(),
        &cfg,
        &pc,
        1,
        None,
    )
    .unwrap();
    assert_eq!(plan.mode, InteractionMode::Grasp);
    let end = pick.object_motion(0, pick.frames - 1).apply(&plan.contact_point());
    assert!((plan.subgoal_points().last().unwrap() - end).norm() < 1e-3);

    let push = push_scene();
    let (plan, _) = plan_manipulation(
        &push.intrinsics,
        &push.render_depth(0).unwrap(),
        &push.render_mask(0, 0).unwrap(),
        &push.render_flows().unwrap(),
        &cfg,
        &pc,
        1,
        None,
    )
    .unwrap();
    assert_eq!(plan.mode, InteractionMode::Push);
    let c = plan.contact_point();
    let a = flowrig::manip_planner::to_point(&plan.approach.unwrap());
    let dir = (plan.subgoal_points()[0] - c).normalize();
    assert!(((a - c).norm() - 0.10).abs() < 1e-9);
    assert!(((c - a).normalize() - dir).norm() < 1e-9);
}

fn world() -> NavWorld {
    NavWorld::new(Room::rectangle(8.0, 10.0), [4.0, 2.0], 0.0, [4.0, 8.0])
}

#[test]
fn one_forward_step_solves_to_quarter_metre() {
    let w = world();
    let clip = scripted_clip(&w, 2, &[NavAction::MoveForward]);
    let mask = flowrig::flowio::scene_mask_from_flow(&clip.flows[0], DEFAULT_MOTION_THRESHOLD);
    let traj = solve_trajectory(&clip.intrinsics, &clip.depth0, &mask, &clip.flows, &SolverConfig::navigation(), 0).unwrap();
    let cam = camera_from_scene(&traj.poses[0]);
    assert!((cam.translation() - Vector3::new(0.0, 0.0, 0.25)).norm() < 1e-5);
    assert!(cam.rotation_angle() < 1e-5);
}

#[test]
fn one_left_turn_solves_to_thirty_degrees() {
    let w = world();
    let clip = scripted_clip(&w, 2, &[NavAction::RotateLeft]);
    let mask = flowrig::flowio::scene_mask_from_flow(&clip.flows[0], DEFAULT_MOTION_THRESHOLD);
    let traj = solve_trajectory(&clip.intrinsics, &clip.depth0, &mask, &clip.flows, &SolverConfig::navigation(), 0).unwrap();
    let cam = camera_from_scene(&traj.poses[0]);
    assert!((heading_change(&cam) - PI / 6.0).abs() < 1e-5);
    assert!(cam.translation().norm() < 1e-5);
}

#[test]
fn scripted_episodes_map_to_their_actions() {
    let th = NavThresholds::default();
    let cfg = SolverConfig::navigation();
    let w = world();
    let clip = scripted_clip(&w, 8, &[NavAction::MoveForward; 3]);
    let ep = run_nav_episode(&clip.flows, &clip.depth0, &clip.intrinsics, &th, &cfg, 0).unwrap();
    assert_eq!(ep.actions, vec![NavAction::MoveForward, NavAction::MoveForward, NavAction::MoveForward, NavAction::Done]);

    let clip = scripted_clip(&w, 8, &[NavAction::MoveForward, NavAction::RotateLeft, NavAction::MoveForward]);
    let ep = run_nav_episode(&clip.flows, &clip.depth0, &clip.intrinsics, &th, &cfg, 0).unwrap();
    assert_eq!(ep.actions.iter().filter(|a| **a == NavAction::RotateLeft).count(), 1);
    assert_eq!(ep.actions.last(), Some(&NavAction::Done));

    let clip = scripted_clip(&w, 8, &[NavAction::RotateRight, NavAction::RotateRight]);
    let ep = run_nav_episode(&clip.flows, &clip.depth0, &clip.intrinsics, &th, &cfg, 0).unwrap();
    assert_eq!(ep.actions, vec![NavAction::RotateRight, NavAction::RotateRight, NavAction::Done]);
}

#[test]
fn spinning_in_place_loses_tracks() {
    let w = world();
    let clip = scripted_clip(&w, 8, &[NavAction::RotateLeft; 7]);
    let ep = run_nav_episode(&clip.flows, &clip.depth0, &clip.intrinsics, &NavThresholds::default(), &SolverConfig::navigation(), 0).unwrap();
    assert!(ep.replan_needed());
    assert!(ep.actions.iter().all(|a| *a == NavAction::RotateLeft));
}

#[test]
fn closed_loop_reaches_targets() {
    let mut successes = 0;
    for seed in 0..10 {
        let mut w = NavWorld::random(seed);
        let r = run_closed_loop(&mut w, 8, 200, &NavThresholds::default(), &SolverConfig::navigation(), seed).unwrap();
        successes += r.success as usize;
    }
    assert!(successes >= 9);
}
