//! Rigid motion from 2D tracks and an initial depth map.
//!
//! Each adjacent frame pair is solved as a perspective reprojection problem:
//! the 3D points of the current frame are moved by an unknown rigid
//! increment and projected through `K`, and the squared pixel distance to the
//! tracked positions is minimized with Levenberg-Marquardt over a left se(3)
//! perturbation. The depth of the later frame never enters the loss.

use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::flowio::{check_same_dims, DepthImage, FlowField, FlowIoError, Interpolation, MaskImage};
use crate::geometry::{skew, CameraIntrinsics, GeometryError, Pixel, Point3, Pose, Twist};
use crate::tracking::{self, chain_tracks, needs_replan, seed_tracks, TrackSet, TrackingError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("RANSAC needs at least 2 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("rigid solve needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("point configuration does not constrain all six degrees of freedom")]
    DegenerateGeometry,
    #[error("{points} points but {targets} targets")]
    LengthMismatch { points: usize, targets: usize },
    #[error("a point lies behind the camera at the initial pose")]
    PointBehindCamera,
    #[error("object mask is empty")]
    EmptyMask,
    #[error("no mask pixel has valid depth")]
    NoValidDepth,
    #[error("only {:.1}% of tracks remain at frame {frame}; replanning required", ratio * 100.0)]
    ReplanNeeded { frame: usize, ratio: f64 },
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    FlowIo(#[from] FlowIoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pixel correspondence between two adjacent frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D {
    pub from: Pixel,
    pub to: Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Inlier distance in pixels.
    pub tolerance_px: f64,
    pub iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { tolerance_px: 2.0, iterations: 200 }
    }
}

/// 2D similarity `p -> [[a, -b], [b, a]] p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity2 {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity2 {
    /// Exact model through two correspondences; `None` if the sources coincide.
    pub fn from_pair(c1: &Correspondence2D, c2: &Correspondence2D) -> Option<Self> {
        let (dx, dy) = (c2.from.u - c1.from.u, c2.from.v - c1.from.v);
        let (ex, ey) = (c2.to.u - c1.to.u, c2.to.v - c1.to.v);
        let den = dx * dx + dy * dy;
        if den < 1e-12 {
            return None;
        }
        // complex division (ex + i ey) / (dx + i dy)
        let a = (ex * dx + ey * dy) / den;
        let b = (ey * dx - ex * dy) / den;
        let tx = c1.to.u - (a * c1.from.u - b * c1.from.v);
        let ty = c1.to.v - (b * c1.from.u + a * c1.from.v);
        Some(Self { a, b, tx, ty })
    }

    /// Least-squares fit over the selected correspondences.
    pub fn fit(corrs: &[Correspondence2D], indices: &[usize]) -> Option<Self> {
        let n = indices.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let (mut mfx, mut mfy, mut mtx, mut mty) = (0.0, 0.0, 0.0, 0.0);
        for &i in indices {
            mfx += corrs[i].from.u;
            mfy += corrs[i].from.v;
            mtx += corrs[i].to.u;
            mty += corrs[i].to.v;
        }
        let (mfx, mfy, mtx, mty) = (mfx / nf, mfy / nf, mtx / nf, mty / nf);
        let (mut sa, mut sb, mut den) = (0.0, 0.0, 0.0);
        for &i in indices {
            let (px, py) = (corrs[i].from.u - mfx, corrs[i].from.v - mfy);
            let (qx, qy) = (corrs[i].to.u - mtx, corrs[i].to.v - mty);
            sa += px * qx + py * qy;
            sb += px * qy - py * qx;
            den += px * px + py * py;
        }
        if den < 1e-12 {
            return None;
        }
        let (a, b) = (sa / den, sb / den);
        Some(Self { a, b, tx: mtx - (a * mfx - b * mfy), ty: mty - (b * mfx + a * mfy) })
    }

    pub fn apply(&self, p: &Pixel) -> Pixel {
        Pixel::new(self.a * p.u - self.b * p.v + self.tx, self.b * p.u + self.a * p.v + self.ty)
    }

    pub fn residual(&self, c: &Correspondence2D) -> f64 {
        self.apply(&c.from).distance(&c.to)
    }
}

/// Consensus of one hypothesis; ordered by inlier count, then summed
/// residual, then hypothesis index.
#[derive(Debug, Clone)]
struct Consensus {
    count: usize,
    residual: f64,
    index: usize,
    inliers: Vec<usize>,
}

impl Consensus {
    fn evaluate(model: &Similarity2, corrs: &[Correspondence2D], tol: f64, index: usize) -> Self {
        let mut inliers = Vec::new();
        let mut residual = 0.0;
        for (i, c) in corrs.iter().enumerate() {
            let r = model.residual(c);
            if r <= tol {
                inliers.push(i);
                residual += r;
            }
        }
        Self { count: inliers.len(), residual, index, inliers }
    }

    fn better_than(&self, other: &Consensus) -> bool {
        (self.count, other.residual, other.index) > (other.count, self.residual, self.index)
    }
}

/// Indices of correspondences consistent with the best 2D similarity found
/// by random 2-point sampling, in ascending order.
pub fn ransac_inliers(corrs: &[Correspondence2D], config: &RansacConfig, seed: u64) -> Result<Vec<usize>, SolverError> {
    let n = corrs.len();
    if n < 2 {
        return Err(SolverError::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Consensus> = None;
    for h in 0..config.iterations.max(1) {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let Some(model) = Similarity2::from_pair(&corrs[i], &corrs[j]) else {
            continue;
        };
        let c = Consensus::evaluate(&model, corrs, config.tolerance_px, h);
        if best.as_ref().is_none_or(|b| c.better_than(b)) {
            best = Some(c);
        }
    }
    let Some(mut best) = best else {
        return Ok(Vec::new());
    };
    // one least-squares refit on the consensus set
    if let Some(refit) = Similarity2::fit(corrs, &best.inliers) {
        let c = Consensus::evaluate(&refit, corrs, config.tolerance_px, best.index);
        if c.count >= best.count {
            best = c;
        }
    }
    Ok(best.inliers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub loss_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_iterations: 100,
            step_tolerance: 1e-10,
            loss_tolerance: 1e-12,
        }
    }
}

/// Outcome of one rigid solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub pose: Pose,
    /// Sum of squared pixel residuals over the inliers.
    pub final_loss: f64,
    pub iterations: usize,
    /// Indices into the solve's input arrays.
    pub inlier_indices: Vec<usize>,
    /// Loss at the start and after every accepted step.
    pub loss_trace: Vec<f64>,
}

/// JSON form of a pose: 9 row-major rotation entries and a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let t = p.translation();
        Self { rotation: p.rotation_row_major(), translation: [t.x, t.y, t.z] }
    }
}

impl TryFrom<&PoseRecord> for Pose {
    type Error = GeometryError;

    fn try_from(r: &PoseRecord) -> Result<Self, Self::Error> {
        Pose::from_row_major(&r.rotation, &r.translation)
    }
}

impl Serialize for SolveReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("SolveReport", 5)?;
        s.serialize_field("pose", &PoseRecord::from(&self.pose))?;
        s.serialize_field("final_loss", &self.final_loss)?;
        s.serialize_field("iterations", &self.iterations)?;
        s.serialize_field("inlier_indices", &self.inlier_indices)?;
        s.serialize_field("loss_trace", &self.loss_trace)?;
        s.end()
    }
}

fn reprojection_loss(k: &CameraIntrinsics, pose: &Pose, points: &[Point3], targets: &[Pixel]) -> f64 {
    let mut loss = 0.0;
    for (x, t) in points.iter().zip(targets) {
        let p = pose.apply(x);
        if !(p.z > 0.0) {
            return f64::INFINITY;
        }
        let du = t.u - (k.fx * p.x / p.z + k.cx);
        let dv = t.v - (k.fy * p.y / p.z + k.cy);
        loss += du * du + dv * dv;
    }
    loss
}

/// Gauss-Newton normal equations `(J^T J, J^T r)` with `r = target - predicted`.
fn normal_equations(k: &CameraIntrinsics, pose: &Pose, points: &[Point3], targets: &[Pixel]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for (x, t) in points.iter().zip(targets) {
        let p = pose.apply(x);
        let iz = 1.0 / p.z;
        let du_dp = [k.fx * iz, 0.0, -k.fx * p.x * iz * iz];
        let dv_dp = [0.0, k.fy * iz, -k.fy * p.y * iz * iz];
        let neg_skew = -skew(&p);
        let mut ju = Vector6::zeros();
        let mut jv = Vector6::zeros();
        for c in 0..3 {
            ju[c] = du_dp[c];
            jv[c] = dv_dp[c];
            ju[3 + c] = (0..3).map(|r| du_dp[r] * neg_skew[(r, c)]).sum();
            jv[3 + c] = (0..3).map(|r| dv_dp[r] * neg_skew[(r, c)]).sum();
        }
        let ru = t.u - (k.fx * p.x * iz + k.cx);
        let rv = t.v - (k.fy * p.y * iz + k.cy);
        h += ju * ju.transpose() + jv * jv.transpose();
        g += ju * ru + jv * rv;
    }
    (h, g)
}

/// Smallest-to-largest eigenvalue ratio of the Jacobi-scaled normal matrix.
fn scaled_condition(h: &Matrix6<f64>) -> f64 {
    let d = Vector6::from_fn(|i, _| {
        let v = h[(i, i)];
        if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }
    });
    let scaled = Matrix6::from_fn(|r, c| h[(r, c)] * d[r] * d[c]);
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.max();
    if !(max > 0.0) {
        return 0.0;
    }
    eig.min().max(0.0) / max
}

/// Minimizes the summed squared reprojection error of `pose * points`
/// against `targets`, starting from `init`.
pub fn solve_increment(
    k: &CameraIntrinsics,
    points: &[Point3],
    targets: &[Pixel],
    init: &Pose,
    config: &LmConfig,
) -> Result<SolveReport, SolverError> {
    if points.len() != targets.len() {
        return Err(SolverError::LengthMismatch { points: points.len(), targets: targets.len() });
    }
    if points.len() < 3 {
        return Err(SolverError::TooFewPoints(points.len()));
    }
    let mut pose = *init;
    let mut loss = reprojection_loss(k, &pose, points, targets);
    if !loss.is_finite() {
        return Err(SolverError::PointBehindCamera);
    }
    let (mut h, mut g) = normal_equations(k, &pose, points, targets);
    if scaled_condition(&h) < 1e-12 {
        return Err(SolverError::DegenerateGeometry);
    }
    let mut lambda = config.lambda_init;
    let mut trace = vec![loss];
    let mut iterations = 0;
    while iterations < config.max_iterations && loss > 0.0 {
        iterations += 1;
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= config.lambda_up;
            continue;
        };
        let step: Twist = chol.solve(&g);
        let candidate = Pose::exp(&step).compose(&pose);
        let new_loss = reprojection_loss(k, &candidate, points, targets);
        if new_loss < loss {
            let decrease = loss - new_loss;
            pose = candidate;
            loss = new_loss;
            trace.push(loss);
            lambda *= config.lambda_down;
            if step.norm() < config.step_tolerance || decrease < config.loss_tolerance {
                break;
            }
            (h, g) = normal_equations(k, &pose, points, targets);
        } else {
            if step.norm() < config.step_tolerance {
                break;
            }
            lambda *= config.lambda_up;
            if lambda > 1e16 {
                break;
            }
        }
    }
    Ok(SolveReport {
        pose,
        final_loss: loss,
        iterations,
        inlier_indices: (0..points.len()).collect(),
        loss_trace: trace,
    })
}

/// Linear pose estimate from at least six non-coplanar 3D-2D
/// correspondences (normalized DLT followed by projection onto SO(3)).
pub fn dlt_pose(k: &CameraIntrinsics, points: &[Point3], targets: &[Pixel]) -> Option<Pose> {
    let n = points.len();
    if n < 6 || targets.len() != n {
        return None;
    }
    let c = points.iter().sum::<Point3>() / n as f64;
    let sigma = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n as f64;
    if !(sigma > 0.0) {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (p, t)) in points.iter().zip(targets).enumerate() {
        let q = (p - c) / sigma;
        let x = [q.x, q.y, q.z, 1.0];
        let (mx, my) = ((t.u - k.cx) / k.fx, (t.v - k.cy) / k.fy);
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -mx * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -my * x[j];
        }
    }
    let svd = (a.transpose() * &a).symmetric_eigen();
    let (imin, _) = svd.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let v = svd.eigenvectors.column(imin);
    let mut m = Matrix3::from_fn(|r, col| v[4 * r + col]);
    let mut p4 = Vector3::new(v[3], v[7], v[11]);
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let msvd = m.svd(true, true);
    let (u, vt) = (msvd.u?, msvd.v_t?);
    let scale = msvd.singular_values.mean();
    if !(scale > 0.0) {
        return None;
    }
    let r = crate::geometry::orthonormalize(&(u * vt));
    // Undo the point normalization: P = [M/sigma | p4 - M c/sigma].
    let t = (p4 - m * c / sigma) / (scale / sigma);
    if (r * c + t).z <= 0.0 {
        return None;
    }
    Pose::new(r, t).ok()
}

/// Linear pose estimate for (nearly) coplanar points: fits the homography
/// from the best-fit plane to normalized image coordinates and decomposes it.
pub fn planar_pose(k: &CameraIntrinsics, points: &[Point3], targets: &[Pixel]) -> Option<Pose> {
    let n = points.len();
    if n < 4 || targets.len() != n {
        return None;
    }
    let c = points.iter().sum::<Point3>() / n as f64;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    let basis = Matrix3::from_columns(&[e1, e2, e1.cross(&e2)]);
    let sigma = (eig.eigenvalues[order[0]] / n as f64).sqrt();
    if !(sigma > 0.0) {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, (p, t)) in points.iter().zip(targets).enumerate() {
        let q = basis.transpose() * (p - c) / sigma;
        let x = [q.x, q.y, 1.0];
        let (mx, my) = ((t.u - k.cx) / k.fx, (t.v - k.cy) / k.fy);
        for j in 0..3 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 6 + j)] = -mx * x[j];
            a[(2 * i + 1, 3 + j)] = x[j];
            a[(2 * i + 1, 6 + j)] = -my * x[j];
        }
    }
    let sol = (a.transpose() * &a).symmetric_eigen();
    let (imin, _) = sol.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let v = sol.eigenvectors.column(imin);
    let mut h1 = Vector3::new(v[0], v[3], v[6]);
    let mut h2 = Vector3::new(v[1], v[4], v[7]);
    let mut h3 = Vector3::new(v[2], v[5], v[8]);
    if h3.z < 0.0 {
        h1 = -h1;
        h2 = -h2;
        h3 = -h3;
    }
    let scale = (h1.norm() + h2.norm()) / 2.0;
    if !(scale > 0.0) {
        return None;
    }
    let rp = crate::geometry::orthonormalize(&Matrix3::from_columns(&[h1 / scale, h2 / scale, (h1 / scale).cross(&(h2 / scale))]));
    // Plane coordinates were scaled by 1/sigma; the homography scale absorbs it.
    let tp = h3 / scale * sigma;
    let r = rp * basis.transpose();
    let t = tp - r * c;
    if (r * c + t).z <= 0.0 {
        return None;
    }
    Pose::new(r, t).ok()
}

/// Tracking and solving parameters shared by the manipulation and
/// navigation pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub num_seeds: usize,
    pub replan_ratio: f64,
    /// RANSAC pre-filter on each adjacent-frame correspondence set.
    pub use_ransac: bool,
    pub ransac: RansacConfig,
    /// After a solve, readmit correspondences whose 3D reprojection error is
    /// within the RANSAC tolerance and solve again.
    pub refine_inliers: bool,
    pub lm: LmConfig,
    pub interpolation: Interpolation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            num_seeds: tracking::DEFAULT_NUM_SEEDS,
            replan_ratio: tracking::DEFAULT_REPLAN_RATIO,
            use_ransac: true,
            ransac: RansacConfig::default(),
            refine_inliers: true,
            lm: LmConfig::default(),
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl SolverConfig {
    /// Navigation variant: no RANSAC, out-of-bounds pruning only.
    pub fn navigation() -> Self {
        Self { use_ransac: false, refine_inliers: false, ..Self::default() }
    }
}

fn reprojection_error(k: &CameraIntrinsics, pose: &Pose, x: &Point3, target: &Pixel) -> f64 {
    match k.project(&pose.apply(x)) {
        Ok((px, _)) => px.distance(target),
        Err(_) => f64::INFINITY,
    }
}

fn select<T: Copy>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i]).collect()
}

/// LM from `init`; unless that is already exact to a thousandth of a pixel,
/// LM again from the linear estimate and keep the lower loss.
fn solve_with_fallback(
    k: &CameraIntrinsics,
    points: &[Point3],
    targets: &[Pixel],
    init: &Pose,
    config: &SolverConfig,
) -> Result<SolveReport, SolverError> {
    let first = solve_increment(k, points, targets, init, &config.lm)?;
    if first.final_loss <= 1e-6 * points.len() as f64 {
        return Ok(first);
    }
    let mut best = first;
    for start in [dlt_pose(k, points, targets), planar_pose(k, points, targets)].into_iter().flatten() {
        if let Ok(r) = solve_increment(k, points, targets, &start, &config.lm) {
            if r.final_loss < best.final_loss {
                best = r;
            }
        }
    }
    Ok(best)
}

/// RANSAC pre-filter followed by the rigid solve; `inlier_indices` of the
/// report index into the inputs.
pub fn solve_robust(
    k: &CameraIntrinsics,
    points: &[Point3],
    from: &[Pixel],
    to: &[Pixel],
    init: &Pose,
    config: &SolverConfig,
    seed: u64,
) -> Result<SolveReport, SolverError> {
    if points.len() != to.len() || from.len() != to.len() {
        return Err(SolverError::LengthMismatch { points: points.len(), targets: to.len() });
    }
    let mut inliers: Vec<usize> = if config.use_ransac {
        let corrs: Vec<Correspondence2D> = from.iter().zip(to).map(|(f, t)| Correspondence2D { from: *f, to: *t }).collect();
        ransac_inliers(&corrs, &config.ransac, seed)?
    } else {
        (0..points.len()).collect()
    };
    let mut report = solve_with_fallback(k, &select(points, &inliers), &select(to, &inliers), init, config)?;
    if config.refine_inliers {
        for _ in 0..3 {
            let expanded: Vec<usize> = (0..points.len())
                .filter(|&i| reprojection_error(k, &report.pose, &points[i], &to[i]) <= config.ransac.tolerance_px)
                .collect();
            if expanded == inliers || expanded.len() < inliers.len() {
                break;
            }
            let pose = report.pose;
            match solve_increment(k, &select(points, &expanded), &select(to, &expanded), &pose, &config.lm) {
                Ok(r) => {
                    report = r;
                    inliers = expanded;
                }
                Err(_) => break,
            }
        }
    }
    report.inlier_indices = inliers;
    Ok(report)
}

/// Cumulative object poses `T_1..T_F` relative to frame 0 plus per-increment
/// diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub increments: Vec<SolveReport>,
    /// Indices into the seeded tracks still used at each solve.
    pub active_counts: Vec<usize>,
    pub num_seeds: usize,
}

/// Solves tracks from frame 0 onwards.
///
/// Stops early when the surviving fraction of seeds drops below
/// `config.replan_ratio`; the poses solved so far are returned together with
/// the replan frame and ratio.
pub fn solve_tracks(
    k: &CameraIntrinsics,
    points0: &[Point3],
    tracks: &TrackSet,
    config: &SolverConfig,
    seed: u64,
) -> Result<(Trajectory, Option<(usize, f64)>), SolverError> {
    let n = tracks.num_tracks();
    let mut traj = Trajectory { poses: Vec::new(), increments: Vec::new(), active_counts: Vec::new(), num_seeds: n };
    let mut active: Vec<usize> = (0..n).filter(|&i| tracks.is_alive(i, 0)).collect();
    let mut cumulative = Pose::identity();
    let mut increment = Pose::identity();
    for t in 0..tracks.frames().saturating_sub(1) {
        active.retain(|&i| tracks.is_alive(i, t + 1));
        let ratio = active.len() as f64 / n.max(1) as f64;
        if needs_replan(ratio, config.replan_ratio) {
            return Ok((traj, Some((t + 1, ratio))));
        }
        let points: Vec<Point3> = active.iter().map(|&i| cumulative.apply(&points0[i])).collect();
        let from: Vec<Pixel> = active.iter().filter_map(|&i| tracks.position(i, t)).collect();
        let to: Vec<Pixel> = active.iter().filter_map(|&i| tracks.position(i, t + 1)).collect();
        let report = solve_robust(k, &points, &from, &to, &increment, config, seed.wrapping_add(t as u64))?;
        traj.active_counts.push(active.len());
        active = report.inlier_indices.iter().map(|&j| active[j]).collect();
        increment = report.pose;
        cumulative = increment.compose(&cumulative);
        traj.poses.push(cumulative);
        traj.increments.push(report);
    }
    Ok((traj, None))
}

/// Seeds `config.num_seeds` tracks in `mask` (restricted to valid depth),
/// backprojects them with `depth0` and returns the frame-0 points together
/// with the chained tracks.
pub fn prepare_tracks(
    k: &CameraIntrinsics,
    depth0: &DepthImage,
    mask: &MaskImage,
    flows: &[FlowField],
    config: &SolverConfig,
    seed: u64,
) -> Result<(Vec<Point3>, TrackSet), SolverError> {
    check_same_dims("depth", depth0.dims(), "mask", mask.dims())?;
    for (i, f) in flows.iter().enumerate() {
        check_same_dims("depth", depth0.dims(), &format!("flow {i}"), f.dims())?;
    }
    if mask.is_empty() {
        return Err(SolverError::EmptyMask);
    }
    let usable = mask.with_valid_depth(depth0);
    if usable.is_empty() {
        return Err(SolverError::NoValidDepth);
    }
    let seeds = seed_tracks(&usable, config.num_seeds, seed)?;
    let points0 = seeds
        .iter()
        .map(|p| k.backproject(p, depth0.get(p.u as usize, p.v as usize)))
        .collect::<Result<Vec<_>, _>>()?;
    let tracks = chain_tracks(&seeds, flows, config.interpolation)?;
    Ok((points0, tracks))
}

/// Cumulative object poses for every flow in `flows`.
pub fn solve_trajectory(
    k: &CameraIntrinsics,
    depth0: &DepthImage,
    mask: &MaskImage,
    flows: &[FlowField],
    config: &SolverConfig,
    seed: u64,
) -> Result<Trajectory, SolverError> {
    let (points0, tracks) = prepare_tracks(k, depth0, mask, flows, config, seed)?;
    match solve_tracks(k, &points0, &tracks, config, seed)? {
        (traj, None) => Ok(traj),
        (_, Some((frame, ratio))) => Err(SolverError::ReplanNeeded { frame, ratio }),
    }
}

/// Camera motion of a static scene: the inverse of the apparent scene motion.
pub fn camera_from_scene(scene: &Pose) -> Pose {
    scene.inverse()
}
