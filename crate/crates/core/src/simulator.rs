//! Synthetic scenes with known motion, rendered to depth, masks and flow,
//! plus a planar navigation world driven by discrete actions.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flowio::{DepthImage, FlowField, MaskImage};
use crate::geometry::{CameraIntrinsics, GeometryError, Pixel, Point3, Pose};
use crate::nav_mapper::{run_nav_episode, NavAction, NavThresholds};
use crate::rigid_solver::{SolverConfig, SolverError};

/// Value written to flow cells whose point falls behind the camera.
const UNKNOWN_FLOW: f32 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("frame {frame} out of range for a {frames}-frame scene")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("episode has ended")]
    EpisodeEnded,
    #[error("no previous pose recorded")]
    NoPreviousPose,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Points in the object frame, splatted to their nearest pixel.
    Points(Vec<Point3>),
    /// Axis-aligned box centred on the object origin, ray-cast per pixel.
    Cuboid { half_extents: Vector3<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// World-from-object pose at every frame.
    pub poses: Vec<Pose>,
}

impl SceneObject {
    pub fn fixed(shape: Shape, pose: Pose, frames: usize) -> Self {
        Self { shape, poses: vec![pose; frames] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// World-from-camera pose at every frame.
    pub camera: Vec<Pose>,
    pub objects: Vec<SceneObject>,
}

/// Surface point seen at a pixel: owning object and its object-frame
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Owner {
    pub object: usize,
    pub local: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub depth: DepthImage,
    pub owners: Vec<Option<Owner>>,
    width: usize,
}

impl RenderedFrame {
    pub fn owner(&self, x: usize, y: usize) -> Option<Owner> {
        self.owners[y * self.width + x]
    }
}

fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let a = (-half[i] - origin[i]) / dir[i];
        let b = (half[i] - origin[i]) / dir[i];
        t_near = t_near.max(a.min(b));
        t_far = t_far.min(a.max(b));
    }
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        self.intrinsics.validate()?;
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(SimError::InvalidScene("frames and image size must be positive".into()));
        }
        if self.camera.len() != self.frames {
            return Err(SimError::InvalidScene(format!("{} camera poses for {} frames", self.camera.len(), self.frames)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.poses.len() != self.frames {
                return Err(SimError::InvalidScene(format!("object {i} has {} poses for {} frames", o.poses.len(), self.frames)));
            }
        }
        Ok(())
    }

    fn check_frame(&self, frame: usize) -> Result<(), SimError> {
        if frame >= self.frames {
            return Err(SimError::FrameOutOfRange { frame, frames: self.frames });
        }
        Ok(())
    }

    /// Camera-from-object pose at `frame`.
    pub fn object_in_camera(&self, object: usize, frame: usize) -> Pose {
        self.camera[frame].inverse().compose(&self.objects[object].poses[frame])
    }

    /// Motion of `object` from frame 0 to `frame` as seen by the camera.
    pub fn object_motion(&self, object: usize, frame: usize) -> Pose {
        self.object_in_camera(object, frame).compose(&self.object_in_camera(object, 0).inverse())
    }

    /// Apparent motion of the static world from frame 0 to `frame`.
    pub fn scene_motion(&self, frame: usize) -> Pose {
        self.camera[frame].inverse().compose(&self.camera[0])
    }

    /// Camera pose at `frame` relative to frame 0.
    pub fn camera_motion(&self, frame: usize) -> Pose {
        self.camera[0].inverse().compose(&self.camera[frame])
    }

    pub fn render(&self, frame: usize) -> Result<RenderedFrame, SimError> {
        self.check_frame(frame)?;
        let (w, h) = (self.width, self.height);
        let k = &self.intrinsics;
        let mut zbuf = vec![f64::INFINITY; w * h];
        let mut owners: Vec<Option<Owner>> = vec![None; w * h];
        for (oi, obj) in self.objects.iter().enumerate() {
            let cam_from_obj = self.object_in_camera(oi, frame);
            match &obj.shape {
                Shape::Points(points) => {
                    for p in points {
                        let c = cam_from_obj.apply(p);
                        let Ok((px, z)) = k.project(&c) else { continue };
                        let (x, y) = (px.u.round(), px.v.round());
                        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                            continue;
                        }
                        let idx = y as usize * w + x as usize;
                        if z < zbuf[idx] {
                            zbuf[idx] = z;
                            owners[idx] = Some(Owner { object: oi, local: *p });
                        }
                    }
                }
                Shape::Cuboid { half_extents } => {
                    let obj_from_cam = cam_from_obj.inverse();
                    let origin = *obj_from_cam.translation();
                    let rot = *obj_from_cam.rotation();
                    for y in 0..h {
                        for x in 0..w {
                            let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                            let Some(t) = ray_box(&origin, &(rot * d), half_extents) else { continue };
                            let idx = y * w + x;
                            if t < zbuf[idx] {
                                zbuf[idx] = t;
                                owners[idx] = Some(Owner { object: oi, local: origin + rot * d * t });
                            }
                        }
                    }
                }
            }
        }
        let depth = zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect();
        Ok(RenderedFrame { depth: DepthImage::from_vec(w, h, depth).expect("sized buffer"), owners, width: w })
    }

    pub fn render_depth(&self, frame: usize) -> Result<DepthImage, SimError> {
        Ok(self.render(frame)?.depth)
    }

    /// Pixels owned by `object` at `frame`.
    pub fn render_mask(&self, frame: usize, object: usize) -> Result<MaskImage, SimError> {
        let r = self.render(frame)?;
        Ok(MaskImage::from_fn(self.width, self.height, |x, y| r.owner(x, y).is_some_and(|o| o.object == object)))
    }

    /// Flow from `from` to `to` for every pixel owned at `from`; zero
    /// elsewhere. Occluded points keep their geometric flow.
    pub fn render_flow(&self, from: usize, to: usize) -> Result<FlowField, SimError> {
        self.check_frame(to)?;
        let r = self.render(from)?;
        Ok(self.flow_from_render(&r, from, to))
    }

    /// Full-precision flow of the point owning `(x, y)` in `r` (rendered at
    /// `from`); `None` for unowned pixels, `Some(None)` when the point ends
    /// up behind the camera.
    pub fn pixel_flow(&self, r: &RenderedFrame, x: usize, y: usize, from: usize, to: usize) -> Option<Option<(f64, f64)>> {
        let o = r.owner(x, y)?;
        let k = &self.intrinsics;
        let a = self.object_in_camera(o.object, from);
        let b = self.object_in_camera(o.object, to);
        Some(match (k.project(&a.apply(&o.local)), k.project(&b.apply(&o.local))) {
            (Ok((p0, _)), Ok((p1, _))) => Some((p1.u - p0.u, p1.v - p0.v)),
            _ => None,
        })
    }

    fn flow_from_render(&self, r: &RenderedFrame, from: usize, to: usize) -> FlowField {
        FlowField::from_fn(self.width, self.height, |x, y| match self.pixel_flow(r, x, y, from, to) {
            None => (0.0, 0.0),
            Some(Some((du, dv))) => (du as f32, dv as f32),
            Some(None) => (UNKNOWN_FLOW, UNKNOWN_FLOW),
        })
    }

    /// Flows between consecutive frames.
    pub fn render_flows(&self) -> Result<Vec<FlowField>, SimError> {
        (0..self.frames.saturating_sub(1))
            .map(|t| {
                let r = self.render(t)?;
                Ok(self.flow_from_render(&r, t, t + 1))
            })
            .collect()
    }
}

/// Replaces the flow at a random `fraction` of the mask pixels with an
/// arbitrary displacement of up to `max_px` pixels. Returns the corrupted
/// pixel count.
pub fn inject_outliers(flow: &mut FlowField, mask: &MaskImage, fraction: f64, max_px: f64, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Separate stream so the corrupted set is independent of track seeding.
    rng.set_stream(7);
    let members = mask.members();
    let n = ((members.len() as f64) * fraction).round() as usize;
    let picked = rand::seq::index::sample(&mut rng, members.len(), n.min(members.len()));
    for i in picked {
        let p = members[i];
        let (du, dv) = flow.get(p.u as usize, p.v as usize);
        let mut off = (0.0, 0.0);
        while (off.0 * off.0 + off.1 * off.1) < 25.0 {
            off = (rng.random_range(-max_px..max_px), rng.random_range(-max_px..max_px));
        }
        flow.set(p.u as usize, p.v as usize, du + off.0 as f32, dv + off.1 as f32);
    }
    n
}

/// Default camera for the scripted fixtures: 160x120, 150 px focal length.
pub fn fixture_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics { fx: 150.0, fy: 150.0, cx: 79.5, cy: 59.5 }
}

fn backdrop(frames: usize) -> SceneObject {
    SceneObject::fixed(
        Shape::Cuboid { half_extents: Vector3::new(20.0, 20.0, 0.1) },
        Pose::from_translation(Vector3::new(0.0, 0.0, 4.0)),
        frames,
    )
}

/// Fixed camera, one box following `poses`, a wall behind it. Object 0 is
/// the box.
pub fn scripted_box_scene(half_extents: Vector3<f64>, poses: Vec<Pose>) -> SceneSpec {
    let frames = poses.len();
    SceneSpec {
        intrinsics: fixture_intrinsics(),
        width: 160,
        height: 120,
        frames,
        camera: vec![Pose::identity(); frames],
        objects: vec![SceneObject { shape: Shape::Cuboid { half_extents }, poses }, backdrop(frames)],
    }
}

fn chain(start: Pose, steps: &[Pose]) -> Vec<Pose> {
    let mut out = vec![start];
    for s in steps {
        out.push(s.compose(out.last().expect("nonempty")));
    }
    out
}

/// Box whose front face sits 1.5 m from the camera, so with the fixture
/// intrinsics every centimetre of lateral motion is exactly one pixel.
fn fixture_box(steps: &[Pose]) -> SceneSpec {
    let start = Pose::from_translation(Vector3::new(0.0, 0.0, 1.6));
    scripted_box_scene(Vector3::new(0.12, 0.1, 0.1), chain(start, steps))
}

/// Box lifted by `lift` over three frames, then carried 5 cm sideways per
/// frame for four frames; 8 frames. Per-frame image shifts are whole pixels
/// when `lift` is a multiple of 3 cm.
pub fn pick_and_place_scene(lift: f64) -> SceneSpec {
    let mut steps = vec![Pose::from_translation(Vector3::new(0.0, -lift / 3.0, 0.0)); 3];
    steps.extend([Pose::from_translation(Vector3::new(0.05, 0.0, 0.0)); 4]);
    fixture_box(&steps)
}

/// Box slid sideways by 4 cm per frame; 8 frames.
pub fn push_scene() -> SceneSpec {
    fixture_box(&[Pose::from_translation(Vector3::new(0.04, 0.0, 0.0)); 7])
}

/// Fixture box translated by `step` every frame.
pub fn translate_scene(step: Vector3<f64>, frames: usize) -> SceneSpec {
    fixture_box(&vec![Pose::from_translation(step); frames.saturating_sub(1)])
}

/// Nothing moves.
pub fn zero_scene(frames: usize) -> SceneSpec {
    translate_scene(Vector3::zeros(), frames)
}

/// Box leaving the image fast enough to lose almost every track by frame 2.
pub fn track_loss_scene() -> SceneSpec {
    translate_scene(Vector3::new(0.3, 0.0, 0.0), 4)
}

fn random_axis<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_displacement<R: Rng>(rng: &mut R, max: f64) -> Vector3<f64> {
    random_axis(rng) * rng.random_range(0.0..=max)
}

/// Two-frame scene: a random box moved by a random rigid motion (rotation
/// about its centre of at most `max_rotation`, centre displacement of at
/// most `max_translation`). 320x240 image, 300 px focal length.
pub fn random_rigid_scene(seed: u64, max_rotation: f64, max_translation: f64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = Vector3::new(rng.random_range(0.2..0.35), rng.random_range(0.2..0.35), rng.random_range(0.1..0.3));
    let center = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2), rng.random_range(2.5..3.5));
    let start = Pose::from_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..0.6), center);
    let motion = Pose::rotation_about(
        &center,
        &random_axis(&mut rng),
        rng.random_range(0.0..=max_rotation),
        random_displacement(&mut rng, max_translation),
    );
    SceneSpec {
        intrinsics: CameraIntrinsics { fx: 300.0, fy: 300.0, cx: 159.5, cy: 119.5 },
        width: 320,
        height: 240,
        frames: 2,
        camera: vec![Pose::identity(); 2],
        objects: vec![
            SceneObject { shape: Shape::Cuboid { half_extents: half }, poses: vec![start, motion.compose(&start)] },
            SceneObject::fixed(Shape::Cuboid { half_extents: Vector3::new(30.0, 30.0, 0.1) }, Pose::from_translation(Vector3::new(0.0, 0.0, 6.0)), 2),
        ],
    }
}

/// Two-frame static scene of random boxes in front of a wall, observed by a
/// camera that rotates by at most `max_rotation` and moves at most
/// `max_translation`.
pub fn random_camera_scene(seed: u64, max_rotation: f64, max_translation: f64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = vec![SceneObject::fixed(
        Shape::Cuboid { half_extents: Vector3::new(30.0, 30.0, 0.1) },
        Pose::from_translation(Vector3::new(0.0, 0.0, 6.0)),
        2,
    )];
    for _ in 0..rng.random_range(3..6) {
        let half = Vector3::new(rng.random_range(0.15..0.5), rng.random_range(0.15..0.5), rng.random_range(0.15..0.5));
        let center = Vector3::new(rng.random_range(-1.2..1.2), rng.random_range(-0.8..0.8), rng.random_range(2.5..4.5));
        let pose = Pose::from_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..PI), center);
        objects.push(SceneObject::fixed(Shape::Cuboid { half_extents: half }, pose, 2));
    }
    let cam1 = Pose::from_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..=max_rotation), random_displacement(&mut rng, max_translation));
    SceneSpec {
        intrinsics: CameraIntrinsics { fx: 300.0, fy: 300.0, cx: 159.5, cy: 119.5 },
        width: 320,
        height: 240,
        frames: 2,
        camera: vec![Pose::identity(), cam1],
        objects,
    }
}

/// World-from-camera pose of a planar agent: camera at height 0 (the floor
/// is at +y), yawed so that heading is counter-clockwise seen from above.
pub fn planar_camera_pose(position: [f64; 2], heading: f64) -> Pose {
    Pose::from_axis_angle(&Vector3::y(), -heading, Vector3::new(position[0], 0.0, position[1]))
}

/// Unit forward direction `(x, z)` for a heading.
pub fn heading_direction(heading: f64) -> [f64; 2] {
    [-heading.sin(), heading.cos()]
}

/// Closed polygonal room extruded between a ceiling and a floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    /// Free-space polygon in the `(x, z)` plane.
    pub polygon: Vec<[f64; 2]>,
    /// Floor height (y grows downwards; the camera sits at y = 0).
    pub floor_y: f64,
    pub ceiling_y: f64,
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - s * ab[0], ap[1] - s * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

impl Room {
    pub fn rectangle(width: f64, depth: f64) -> Self {
        Self {
            polygon: vec![[0.0, 0.0], [width, 0.0], [width, depth], [0.0, depth]],
            floor_y: 1.2,
            ceiling_y: -1.3,
        }
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.polygon.len();
        (0..n).map(move |i| (self.polygon[i], self.polygon[(i + 1) % n]))
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn wall_distance(&self, p: [f64; 2]) -> f64 {
        self.edges().map(|(a, b)| point_segment_distance(p, a, b)).fold(f64::INFINITY, f64::min)
    }

    /// Inside, at least `margin` from every wall.
    pub fn is_free(&self, p: [f64; 2], margin: f64) -> bool {
        self.contains(p) && self.wall_distance(p) >= margin
    }

    /// Ray parameter of the first surface hit from `origin` along `dir`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best = f64::INFINITY;
        for plane in [self.floor_y, self.ceiling_y] {
            if dir.y != 0.0 {
                let t = (plane - origin.y) / dir.y;
                if t > 0.0 {
                    best = best.min(t);
                }
            }
        }
        for (a, b) in self.edges() {
            let e = [b[0] - a[0], b[1] - a[1]];
            let den = dir.x * e[1] - dir.z * e[0];
            if den.abs() < 1e-15 {
                continue;
            }
            let w = [a[0] - origin.x, a[1] - origin.z];
            let t = (w[0] * e[1] - w[1] * e[0]) / den;
            let s = (w[0] * dir.z - w[1] * dir.x) / den;
            if t > 0.0 && (0.0..=1.0).contains(&s) {
                best = best.min(t);
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Depth seen from a camera pose and the world point behind every pixel.
pub fn render_room(room: &Room, k: &CameraIntrinsics, width: usize, height: usize, camera: &Pose) -> (DepthImage, Vec<Option<Point3>>) {
    let origin = *camera.translation();
    let rot = *camera.rotation();
    let mut depth = vec![0.0; width * height];
    let mut points = vec![None; width * height];
    for y in 0..height {
        for x in 0..width {
            let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let world_dir = rot * d;
            if let Some(t) = room.cast(&origin, &world_dir) {
                depth[y * width + x] = t;
                points[y * width + x] = Some(origin + world_dir * t);
            }
        }
    }
    (DepthImage::from_vec(width, height, depth).expect("sized buffer"), points)
}

/// Ground-truth flow of the static room between two camera poses.
pub fn render_room_flow(room: &Room, k: &CameraIntrinsics, width: usize, height: usize, from: &Pose, to: &Pose) -> FlowField {
    if from == to {
        return FlowField::zeros(width, height);
    }
    let (_, points) = render_room(room, k, width, height, from);
    let view = to.inverse();
    FlowField::from_fn(width, height, |x, y| match points[y * width + x] {
        Some(p) => match k.project(&view.apply(&p)) {
            Ok((px, _)) => ((px.u - x as f64) as f32, (px.v - y as f64) as f32),
            Err(_) => (UNKNOWN_FLOW, UNKNOWN_FLOW),
        },
        None => (0.0, 0.0),
    })
}

/// Planar navigation world.
#[derive(Debug, Clone, PartialEq)]
pub struct NavWorld {
    pub room: Room,
    pub position: [f64; 2],
    /// Radians in `[0, 2pi)`, counter-clockwise seen from above; 0 faces +z.
    pub heading: f64,
    pub target: [f64; 2],
    pub step: f64,
    pub turn: f64,
    pub success_radius: f64,
    /// Minimum clearance kept from walls.
    pub wall_margin: f64,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    previous: Option<([f64; 2], f64)>,
    ended: bool,
    success: Option<bool>,
    steps_taken: usize,
}

/// Depth at the previous pose, depth at the current pose and the flow
/// between them.
#[derive(Debug, Clone, PartialEq)]
pub struct NavObservation {
    pub previous_depth: DepthImage,
    pub depth: DepthImage,
    pub flow: FlowField,
}

pub fn normalize_heading(h: f64) -> f64 {
    let r = h.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

impl NavWorld {
    pub fn new(room: Room, position: [f64; 2], heading: f64, target: [f64; 2]) -> Self {
        Self {
            room,
            position,
            heading: normalize_heading(heading),
            target,
            step: 0.25,
            turn: 30f64.to_radians(),
            success_radius: 1.5,
            wall_margin: 0.2,
            intrinsics: CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 79.5, cy: 59.5 },
            width: 160,
            height: 120,
            previous: None,
            ended: false,
            success: None,
            steps_taken: 0,
        }
    }

    /// Random convex (rectangular) room with start and target at least 3 m
    /// apart.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, d) = (rng.random_range(6.0..12.0), rng.random_range(6.0..12.0));
        let room = Room::rectangle(w, d);
        let pick = |rng: &mut ChaCha8Rng| [rng.random_range(0.6..w - 0.6), rng.random_range(0.6..d - 0.6)];
        let start = pick(&mut rng);
        let target = loop {
            let t = pick(&mut rng);
            if ((t[0] - start[0]).powi(2) + (t[1] - start[1]).powi(2)).sqrt() >= 3.0 {
                break t;
            }
        };
        Self::new(room, start, rng.random_range(0.0..TAU), target)
    }

    pub fn camera_pose(&self) -> Pose {
        planar_camera_pose(self.position, self.heading)
    }

    pub fn distance_to_target(&self) -> f64 {
        ((self.target[0] - self.position[0]).powi(2) + (self.target[1] - self.position[1]).powi(2)).sqrt()
    }

    /// Target direction relative to the heading, counter-clockwise positive,
    /// in `(-pi, pi]`.
    pub fn bearing(&self) -> f64 {
        let dx = self.target[0] - self.position[0];
        let dz = self.target[1] - self.position[1];
        let target_heading = (-dx).atan2(dz);
        let mut b = (target_heading - self.heading).rem_euclid(TAU);
        if b > PI {
            b -= TAU;
        }
        b
    }

    pub fn ended(&self) -> bool {
        self.ended
    }

    pub fn success(&self) -> Option<bool> {
        self.success
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn previous_pose(&self) -> Option<([f64; 2], f64)> {
        self.previous
    }

    pub fn step(&mut self, action: NavAction) -> Result<(), SimError> {
        if self.ended {
            return Err(SimError::EpisodeEnded);
        }
        self.previous = Some((self.position, self.heading));
        self.steps_taken += 1;
        match action {
            NavAction::MoveForward => {
                let f = heading_direction(self.heading);
                let next = [self.position[0] + self.step * f[0], self.position[1] + self.step * f[1]];
                if self.room.is_free(next, self.wall_margin) {
                    self.position = next;
                }
            }
            NavAction::RotateLeft => self.heading = normalize_heading(self.heading + self.turn),
            NavAction::RotateRight => self.heading = normalize_heading(self.heading - self.turn),
            NavAction::Done => {
                self.ended = true;
                self.success = Some(self.distance_to_target() <= self.success_radius);
            }
        }
        Ok(())
    }

    pub fn render_depth(&self) -> DepthImage {
        render_room(&self.room, &self.intrinsics, self.width, self.height, &self.camera_pose()).0
    }

    pub fn observe(&self) -> Result<NavObservation, SimError> {
        let (pos, heading) = self.previous.ok_or(SimError::NoPreviousPose)?;
        let prev = planar_camera_pose(pos, heading);
        let cur = self.camera_pose();
        Ok(NavObservation {
            previous_depth: render_room(&self.room, &self.intrinsics, self.width, self.height, &prev).0,
            depth: self.render_depth(),
            flow: render_room_flow(&self.room, &self.intrinsics, self.width, self.height, &prev, &cur),
        })
    }
}

pub fn nav_world_step(world: &NavWorld, action: NavAction) -> Result<NavWorld, SimError> {
    let mut next = world.clone();
    next.step(action)?;
    Ok(next)
}

pub fn render_nav_observation(world: &NavWorld) -> Result<NavObservation, SimError> {
    world.observe()
}

/// Stop within 1 m, otherwise face the target to within 15 degrees and walk.
pub fn expert_action(world: &NavWorld) -> NavAction {
    if world.distance_to_target() <= 1.0 {
        return NavAction::Done;
    }
    let b = world.bearing();
    if b > 15f64.to_radians() {
        NavAction::RotateLeft
    } else if b < -15f64.to_radians() {
        NavAction::RotateRight
    } else {
        NavAction::MoveForward
    }
}

/// A clip of `frames` observations along the expert path; once the expert
/// stops the last frame repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct NavClip {
    pub intrinsics: CameraIntrinsics,
    pub depth0: DepthImage,
    pub flows: Vec<FlowField>,
    pub expert_actions: Vec<NavAction>,
    /// Camera poses (world-from-camera) for every frame.
    pub poses: Vec<Pose>,
}

pub fn expert_clip(world: &NavWorld, frames: usize) -> NavClip {
    clip_from_policy(world, frames, expert_action)
}

/// Clip following a fixed action script (then repeating the last frame).
pub fn scripted_clip(world: &NavWorld, frames: usize, script: &[NavAction]) -> NavClip {
    let mut i = 0;
    clip_from_policy(world, frames, |_| {
        let a = script.get(i).copied().unwrap_or(NavAction::Done);
        i += 1;
        a
    })
}

fn clip_from_policy(world: &NavWorld, frames: usize, mut policy: impl FnMut(&NavWorld) -> NavAction) -> NavClip {
    let mut w = world.clone();
    let mut poses = vec![w.camera_pose()];
    let mut actions = Vec::new();
    let mut stopped = false;
    while poses.len() < frames {
        if !stopped {
            let a = policy(&w);
            actions.push(a);
            if a == NavAction::Done {
                stopped = true;
            } else {
                w.step(a).expect("running episode");
            }
        }
        poses.push(w.camera_pose());
    }
    let flows = poses
        .windows(2)
        .map(|p| render_room_flow(&world.room, &world.intrinsics, world.width, world.height, &p[0], &p[1]))
        .collect();
    NavClip {
        intrinsics: world.intrinsics,
        depth0: render_room(&world.room, &world.intrinsics, world.width, world.height, &poses[0]).0,
        flows,
        expert_actions: actions,
        poses,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopResult {
    pub success: bool,
    pub reached_done: bool,
    pub final_distance: f64,
    pub actions: Vec<NavAction>,
    pub clips: usize,
    pub replans: usize,
}

/// Drives the world with actions read off expert clips until `Done` or
/// `max_steps`.
pub fn run_closed_loop(
    world: &mut NavWorld,
    frames: usize,
    max_steps: usize,
    th: &NavThresholds,
    config: &SolverConfig,
    seed: u64,
) -> Result<ClosedLoopResult, SolverError> {
    let mut actions = Vec::new();
    let (mut clips, mut replans) = (0, 0);
    'outer: while !world.ended() && actions.len() < max_steps {
        let clip = expert_clip(world, frames);
        clips += 1;
        let ep = run_nav_episode(&clip.flows, &clip.depth0, &clip.intrinsics, th, config, seed.wrapping_add(clips as u64))?;
        if ep.replan_needed() {
            replans += 1;
        }
        if ep.actions.is_empty() {
            // Tracking collapsed before the first step; fall back to the clip's first action.
            let a = clip.expert_actions.first().copied().unwrap_or(NavAction::Done);
            world.step(a).expect("running episode");
            actions.push(a);
            continue;
        }
        for a in ep.actions {
            world.step(a).expect("running episode");
            actions.push(a);
            if world.ended() || actions.len() >= max_steps {
                break 'outer;
            }
        }
    }
    Ok(ClosedLoopResult {
        success: world.success() == Some(true),
        reached_done: world.ended(),
        final_distance: world.distance_to_target(),
        actions,
        clips,
        replans,
    })
}

/// Geodesic angle of the rotation part about the vertical axis, in the
/// heading convention (counter-clockwise positive).
pub fn heading_change(camera_motion: &Pose) -> f64 {
    let r: &Matrix3<f64> = camera_motion.rotation();
    -(r[(0, 2)]).atan2(r[(0, 0)])
}

/// Pixel at which the camera sees a world point, if in front.
pub fn project_world(k: &CameraIntrinsics, camera: &Pose, p: &Point3) -> Option<Pixel> {
    k.project(&camera.inverse().apply(p)).ok().map(|(px, _)| px)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_scene(points: Vec<Point3>) -> SceneSpec {
        SceneSpec {
            intrinsics: CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0).unwrap(),
            width: 128,
            height: 128,
            frames: 1,
            camera: vec![Pose::identity()],
            objects: vec![SceneObject::fixed(Shape::Points(points), Pose::identity(), 1)],
        }
    }

    #[test]
    fn single_point_depth() {
        let d = point_scene(vec![Point3::new(0.0, 0.0, 2.0)]).render_depth(0).unwrap();
        assert_eq!(d.get(64, 64), 2.0);
        assert_eq!(d.valid_count(), 1);
    }

    #[test]
    fn nearest_point_wins() {
        let d = point_scene(vec![Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, 1.0)]).render_depth(0).unwrap();
        assert_eq!(d.get(64, 64), 1.0);
    }

    #[test]
    fn frame_out_of_range() {
        assert!(matches!(point_scene(vec![]).render_depth(1), Err(SimError::FrameOutOfRange { frame: 1, frames: 1 })));
    }

    #[test]
    fn plane_depth_is_exact() {
        let s = translate_scene(Vector3::zeros(), 1);
        let r = s.render(0).unwrap();
        let mask = s.render_mask(0, 0).unwrap();
        assert!(mask.count() > 100);
        for p in mask.members() {
            assert!((r.depth.get(p.u as usize, p.v as usize) - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let f = zero_scene(2).render_flow(0, 1).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn translated_object_flow_matches_projection() {
        let s = translate_scene(Vector3::new(0.05, -0.02, 0.1), 2);
        let r = s.render(0).unwrap();
        let f = s.render_flow(0, 1).unwrap();
        let k = s.intrinsics;
        let motion = s.object_motion(0, 1);
        let mut checked = 0;
        for y in 0..s.height {
            for x in 0..s.width {
                let Some(o) = r.owner(x, y) else { continue };
                if o.object != 0 {
                    continue;
                }
                let p0 = k.backproject(&Pixel::new(x as f64, y as f64), r.depth.get(x, y)).unwrap();
                let (p1, _) = k.project(&motion.apply(&p0)).unwrap();
                let (du, dv) = f.get(x, y);
                assert!((du as f64 - (p1.u - x as f64)).abs() < 1e-4);
                assert!((dv as f64 - (p1.v - y as f64)).abs() < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn seeded_scenes_reproduce() {
        assert_eq!(random_rigid_scene(5, 0.5, 0.5), random_rigid_scene(5, 0.5, 0.5));
        assert_ne!(random_rigid_scene(5, 0.5, 0.5), random_rigid_scene(6, 0.5, 0.5));
        let a = random_camera_scene(3, 0.5, 0.5).render_flows().unwrap();
        let b = random_camera_scene(3, 0.5, 0.5).render_flows().unwrap();
        assert_eq!(a, b);
    }

    fn room_world() -> NavWorld {
        NavWorld::new(Room::rectangle(6.0, 8.0), [3.0, 2.0], 0.0, [3.0, 6.0])
    }

    #[test]
    fn rotate_left_then_right_restores() {
        let w = room_world();
        let w2 = nav_world_step(&nav_world_step(&w, NavAction::RotateLeft).unwrap(), NavAction::RotateRight).unwrap();
        assert!((w2.heading - w.heading).abs() < 1e-12 || (w2.heading - w.heading).abs() > TAU - 1e-12);
        assert_eq!(w2.position, w.position);
    }

    #[test]
    fn forward_steps_accumulate() {
        let mut w = room_world();
        for _ in 0..4 {
            w.step(NavAction::MoveForward).unwrap();
        }
        assert!((w.position[1] - 3.0).abs() < 1e-12);
        assert!((w.position[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn walls_block_motion() {
        let mut w = NavWorld::new(Room::rectangle(6.0, 8.0), [3.0, 7.75], 0.0, [3.0, 1.0]);
        let before = w.position;
        w.step(NavAction::MoveForward).unwrap();
        assert_eq!(w.position, before);
    }

    #[test]
    fn done_ends_episode() {
        let mut w = room_world();
        w.step(NavAction::Done).unwrap();
        assert_eq!(w.success(), Some(false));
        assert_eq!(w.step(NavAction::MoveForward), Err(SimError::EpisodeEnded));
    }

    #[test]
    fn observation_needs_previous_pose() {
        assert_eq!(room_world().observe(), Err(SimError::NoPreviousPose));
        let obs = nav_world_step(&room_world(), NavAction::MoveForward).unwrap().observe().unwrap();
        assert!(obs.flow.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn blocked_step_gives_zero_flow() {
        let w = NavWorld::new(Room::rectangle(6.0, 8.0), [3.0, 7.75], 0.0, [3.0, 1.0]);
        let obs = nav_world_step(&w, NavAction::MoveForward).unwrap().observe().unwrap();
        assert!(obs.flow.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heading_convention() {
        // Turning left (counter-clockwise from above) faces -x.
        let f = heading_direction(PI / 2.0);
        assert!((f[0] + 1.0).abs() < 1e-12 && f[1].abs() < 1e-12);
        let cam = planar_camera_pose([0.0, 0.0], PI / 2.0);
        let fwd = cam.rotation() * Vector3::z();
        assert!((fwd - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((heading_change(&cam) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bearing_signs() {
        let w = NavWorld::new(Room::rectangle(6.0, 8.0), [3.0, 2.0], 0.0, [1.0, 2.0]);
        assert!((w.bearing() - PI / 2.0).abs() < 1e-12);
        assert_eq!(expert_action(&w), NavAction::RotateLeft);
    }

    #[test]
    fn room_cast_hits_walls_and_floor() {
        let room = Room::rectangle(4.0, 4.0);
        let t = room.cast(&Vector3::new(2.0, 0.0, 1.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((t - 3.0).abs() < 1e-12);
        let t = room.cast(&Vector3::new(2.0, 0.0, 1.0), &Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert!((t - 1.2).abs() < 1e-12);
        assert!(room.contains([1.0, 1.0]) && !room.contains([5.0, 1.0]));
    }
}
