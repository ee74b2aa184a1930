use flowrig::diffusion::*;
use flowrig::flowio::*;
use flowrig::geometry::*;
use flowrig::manip_planner::ReplanMonitor;
use flowrig::nav_mapper::{infer_nav_action, NavAction, NavThresholds};
use flowrig::tracking::{chain_tracks, seed_tracks};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(1.0), 0.0..3.0f64, vec3(2.0)).prop_filter_map("zero axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| Pose::from_axis_angle(&axis.normalize(), angle, t))
    })
}

fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
    (50.0..800.0f64, 50.0..800.0f64, 0.0..640.0f64, 0.0..480.0f64)
        .prop_map(|(fx, fy, cx, cy)| CameraIntrinsics::new(fx, fy, cx, cy).unwrap())
}

fn mirror_x(p: &Pose) -> Pose {
    let s = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
    Pose::new(s * p.rotation() * s, s * p.translation()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn project_backproject_roundtrip(k in intrinsics(), u in -100.0..700.0f64, v in -100.0..500.0f64, d in 0.05..50.0f64) {
        let p = k.backproject(&Pixel::new(u, v), d).unwrap();
        let (px, z) = k.project(&p).unwrap();
        prop_assert!((px.u - u).abs() < 1e-9 && (px.v - v).abs() < 1e-9);
        prop_assert!((z - d).abs() < 1e-12 * d.max(1.0));
    }

    #[test]
    fn compose_distributes_over_apply(a in pose(), b in pose(), p in vec3(5.0)) {
        let lhs = a.compose(&b).apply(&p);
        let rhs = a.apply(&b.apply(&p));
        prop_assert!((lhs - rhs).norm() < 1e-9);
    }

    #[test]
    fn inverse_cancels(a in pose(), p in vec3(5.0)) {
        prop_assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-9);
        let id = a.compose(&a.inverse());
        prop_assert!(id.rotation_angle() < 1e-9 && id.translation().norm() < 1e-9);
    }

    #[test]
    fn log_exp_roundtrip(a in pose()) {
        let back = se3_exp(&se3_log(&a).unwrap());
        prop_assert!(back.rotation_distance(&a) < 1e-9);
        prop_assert!(back.translation_distance(&a) < 1e-9);
    }

    #[test]
    fn flo_roundtrip_is_bit_exact(w in 1usize..20, h in 1usize..20, vals in prop::collection::vec(any::<f32>(), 800)) {
        let data: Vec<f32> = vals.iter().cycle().take(w * h * 2).copied().collect();
        let flow = FlowField::from_vec(w, h, data.clone()).unwrap();
        let bytes = encode_flow(&flow);
        prop_assert_eq!(bytes.len(), 12 + 8 * w * h);
        let back = decode_flow(&bytes).unwrap();
        prop_assert_eq!(back.dims(), (w, h));
        for (a, b) in back.data().iter().zip(&data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scene_mask_shrinks_with_threshold(vals in prop::collection::vec(-5.0f32..5.0, 2 * 64), t1 in 0.0..5.0f64, t2 in 0.0..5.0f64) {
        let flow = FlowField::from_vec(8, 8, vals).unwrap();
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let a = scene_mask_from_flow(&flow, lo);
        let b = scene_mask_from_flow(&flow, hi);
        for y in 0..8 {
            for x in 0..8 {
                prop_assert!(!b.get(x, y) || a.get(x, y));
            }
        }
    }

    #[test]
    fn liveness_is_monotone(du in -3.0f32..3.0, dv in -3.0f32..3.0, frames in 1usize..6, seed in any::<u64>()) {
        let mask = MaskImage::full(12, 10);
        let flows = vec![FlowField::from_fn(12, 10, |_, _| (du, dv)); frames];
        let seeds = seed_tracks(&mask, 30, seed).unwrap();
        let tracks = chain_tracks(&seeds, &flows, Interpolation::Bilinear).unwrap();
        for f in 1..=frames {
            prop_assert!(tracks.alive_count(f) <= tracks.alive_count(f - 1));
            for i in 0..tracks.num_tracks() {
                prop_assert!(!tracks.is_alive(i, f) || tracks.is_alive(i, f - 1));
            }
        }
    }

    #[test]
    fn seeding_is_deterministic(seed in any::<u64>(), n in 1usize..200) {
        let mask = MaskImage::from_fn(16, 16, |x, y| (x + y) % 3 == 0);
        prop_assert_eq!(seed_tracks(&mask, n, seed).unwrap(), seed_tracks(&mask, n, seed).unwrap());
    }

    #[test]
    fn nav_mirror_swaps_turns(p in pose()) {
        let th = NavThresholds::default();
        let a = infer_nav_action(&p, &th);
        let b = infer_nav_action(&mirror_x(&p), &th);
        let expected = match a {
            NavAction::RotateLeft => NavAction::RotateRight,
            NavAction::RotateRight => NavAction::RotateLeft,
            other => other,
        };
        prop_assert_eq!(b, expected);
    }

    #[test]
    fn identity_is_done_at_any_probe(d in 1e-3..1e3f64) {
        let th = NavThresholds { probe_distance: d, ..Default::default() };
        prop_assert_eq!(infer_nav_action(&Pose::identity(), &th), NavAction::Done);
    }

    #[test]
    fn prediction_conversions_roundtrip(x in prop::collection::vec(-3.0..3.0f64, 1..16), t in 0usize..100, seed in any::<u64>()) {
        let s = DiffusionSchedule::default();
        let pred: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 1.7 + (seed % 97) as f64 * 0.01 + i as f64).sin()).collect();
        let p = convert_prediction(&pred, PredictionKind::Velocity, &x, t, &s).unwrap();
        for (kind, src) in [(PredictionKind::Clean, &p.x0), (PredictionKind::Noise, &p.eps)] {
            let q = convert_prediction(src, kind, &x, t, &s).unwrap();
            for (a, b) in q.v.iter().zip(&pred) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{:?} t={}", kind, t);
            }
        }
    }

    #[test]
    fn cosine_schedule_invariants(steps in 2usize..400, s in 0.0..0.05f64) {
        let sched = DiffusionSchedule::cosine(steps, s).unwrap();
        prop_assert_eq!(sched.betas.len(), steps);
        for t in 0..steps {
            prop_assert!(sched.betas[t] > 0.0 && sched.betas[t] <= MAX_BETA);
            let (a, b) = sched.coefficients(t);
            prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
            if t > 0 {
                prop_assert!(sched.alpha_bars[t] < sched.alpha_bars[t - 1]);
            }
        }
    }

    #[test]
    fn adaptive_plans_are_well_formed(len in 1usize..500, frac in 0.0..1.0f64, frames in 1usize..20) {
        let start = ((len as f64 * frac) as usize).min(len - 1);
        let plan = adaptive_frames(len, start, frames).unwrap();
        prop_assert_eq!(plan.indices.len(), frames);
        prop_assert_eq!(*plan.indices.last().unwrap(), len - 1);
        if frames > 1 {
            prop_assert_eq!(plan.indices[0], start);
        }
        prop_assert!(plan.indices.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ema_matches_closed_form(decay in 0.5..0.9999f64, every in 1usize..5, n in 0usize..40, c in -10.0..10.0f64) {
        let mut ema = Ema::new(vec![0.0], decay, every);
        for _ in 0..n {
            ema.observe(&[c]).unwrap();
        }
        let k = (n / every) as i32;
        let expected = c * (1.0 - decay.powi(k));
        prop_assert!((ema.params[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn stationary_positions_always_replan(window in 1usize..20, x in -1.0..1.0f64) {
        let mut m = ReplanMonitor::new(window, 0.001);
        let p = Vector3::new(x, 0.0, 1.0);
        let flags: Vec<bool> = (0..window + 3).map(|_| m.should_replan(p)).collect();
        prop_assert!(flags[..window - 1].iter().all(|f| !f));
        prop_assert!(flags[window - 1..].iter().all(|f| *f));
    }

    #[test]
    fn moving_positions_never_replan(window in 2usize..20, step in 0.001..0.1f64) {
        let mut m = ReplanMonitor::new(window, 0.001);
        for i in 0..3 * window {
            prop_assert!(!m.should_replan(Vector3::new(i as f64 * step * 1.0001, 0.0, 1.0)));
        }
    }
}
