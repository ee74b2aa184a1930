//! Diffusion process maths: cosine schedule, forward noising, prediction
//! parameterizations, DDPM/DDIM reverse steps, loss weighting, EMA and the
//! frame samplers used to build training clips.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMESTEPS: usize = 100;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_MIN_SNR_GAMMA: f64 = 5.0;
pub const DEFAULT_EMA_DECAY: f64 = 0.999;
pub const DEFAULT_EMA_UPDATE_EVERY: usize = 10;
pub const DEFAULT_CLIP_FRAMES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("shape mismatch: expected length {expected}, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("timestep {t} outside schedule of {timesteps}")]
    InvalidTimestep { t: usize, timesteps: usize },
    #[error("invalid range: {0}")]
    InvalidRange(String),
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::ShapeMismatch { expected: a.len(), found: b.len() });
    }
    Ok(())
}

/// Noise schedule indexed `0..timesteps`; `alpha_bars[t]` is the cumulative
/// product of `1 - betas[..=t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

fn cosine_f(x: f64, s: f64) -> f64 {
    ((x + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2)
}

impl DiffusionSchedule {
    /// Cosine schedule with offset `s`, betas clipped to `MAX_BETA`.
    pub fn cosine(timesteps: usize, s: f64) -> Result<Self, DiffusionError> {
        if timesteps == 0 {
            return Err(DiffusionError::InvalidRange("schedule needs at least one timestep".into()));
        }
        let f0 = cosine_f(0.0, s);
        let raw: Vec<f64> = (0..timesteps).map(|i| cosine_f((i + 1) as f64 / timesteps as f64, s) / f0).collect();
        let mut prev = 1.0;
        let betas: Vec<f64> = raw
            .iter()
            .map(|&ab| {
                let b = (1.0 - ab / prev).min(MAX_BETA);
                prev = ab;
                b
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidRange("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidRange(format!("beta {b} not in (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { timesteps: betas.len(), betas, alpha_bars })
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.timesteps {
            return Err(DiffusionError::InvalidTimestep { t, timesteps: self.timesteps });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `alpha_bar` one step earlier, 1 before the first step.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ab / (1.0 - ab)
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::cosine(DEFAULT_TIMESTEPS, COSINE_OFFSET).expect("nonzero timesteps")
    }
}

/// `sqrt(ab) x0 + sqrt(1 - ab) noise`.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    same_len(x0, noise)?;
    let (a, b) = sched.coefficients(t);
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Noise,
    Clean,
    #[default]
    Velocity,
}

/// The same prediction in all three parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn convert_prediction(
    pred: &[f64],
    kind: PredictionKind,
    x_t: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Prediction, DiffusionError> {
    sched.check(t)?;
    same_len(x_t, pred)?;
    let (a, b) = sched.coefficients(t);
    let n = pred.len();
    let (mut x0, mut eps, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&p, &x) in pred.iter().zip(x_t) {
        let (xi, ei, vi) = match kind {
            PredictionKind::Velocity => (a * x - b * p, b * x + a * p, p),
            PredictionKind::Clean => {
                let e = (x - a * p) / b;
                (p, e, a * e - b * p)
            }
            PredictionKind::Noise => {
                let c = (x - b * p) / a;
                (c, p, a * p - b * c)
            }
        };
        x0.push(xi);
        eps.push(ei);
        v.push(vi);
    }
    Ok(Prediction { x0, eps, v })
}

/// Velocity target `sqrt(ab) eps - sqrt(1 - ab) x0`.
pub fn velocity_target(x0: &[f64], eps: &[f64], t: usize, sched: &DiffusionSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    same_len(x0, eps)?;
    let (a, b) = sched.coefficients(t);
    Ok(x0.iter().zip(eps).map(|(x, e)| a * e - b * x).collect())
}

/// Min-SNR loss weight for the velocity objective.
pub fn min_snr_weight(t: usize, sched: &DiffusionSchedule, gamma: f64) -> f64 {
    let snr = sched.snr(t);
    snr.min(gamma) / (snr + 1.0)
}

pub trait Denoiser {
    fn kind(&self) -> PredictionKind;

    /// Prediction for `x_t` at timestep `t`, same length as `x_t`.
    fn predict(&self, x_t: &[f64], t: usize) -> Vec<f64>;
}

/// Exact posterior-mean denoiser for scalar Gaussian data `N(mean, std^2)`,
/// applied elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
    pub kind: PredictionKind,
    pub schedule: DiffusionSchedule,
}

impl GaussianOracle {
    pub fn new(mean: f64, std: f64, kind: PredictionKind, schedule: DiffusionSchedule) -> Self {
        Self { mean, std, kind, schedule }
    }

    /// `E[x0 | x_t]`.
    pub fn posterior_mean(&self, x_t: f64, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        let var = self.std * self.std;
        (ab.sqrt() * var * x_t + (1.0 - ab) * self.mean) / (ab * var + (1.0 - ab))
    }
}

impl Denoiser for GaussianOracle {
    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn predict(&self, x_t: &[f64], t: usize) -> Vec<f64> {
        let (a, b) = self.schedule.coefficients(t);
        x_t.iter()
            .map(|&x| {
                let x0 = self.posterior_mean(x, t);
                match self.kind {
                    PredictionKind::Clean => x0,
                    PredictionKind::Noise => (x - a * x0) / b,
                    PredictionKind::Velocity => {
                        let e = (x - a * x0) / b;
                        a * e - b * x0
                    }
                }
            })
            .collect()
    }
}

/// Denoiser that always predicts the same clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantClean(pub Vec<f64>);

impl Denoiser for ConstantClean {
    fn kind(&self) -> PredictionKind {
        PredictionKind::Clean
    }

    fn predict(&self, _x_t: &[f64], _t: usize) -> Vec<f64> {
        self.0.clone()
    }
}

fn denoise(x_t: &[f64], t: usize, denoiser: &dyn Denoiser, sched: &DiffusionSchedule) -> Result<Prediction, DiffusionError> {
    sched.check(t)?;
    let pred = denoiser.predict(x_t, t);
    convert_prediction(&pred, denoiser.kind(), x_t, t, sched)
}

/// Variance of the DDPM reverse transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `beta_t (1 - ab_{t-1}) / (1 - ab_t)`.
    #[default]
    Posterior,
    /// `beta_t`.
    Beta,
}

/// One ancestral step `x_t -> x_{t-1}`; at `t = 0` returns the clean
/// prediction.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &[f64],
    t: usize,
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    variance: PosteriorVariance,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    let pred = denoise(x_t, t, denoiser, sched)?;
    if t == 0 {
        return Ok(pred.x0);
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar_prev(t);
    let beta = sched.betas[t];
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = match variance {
        PosteriorVariance::Posterior => beta * (1.0 - ab_prev) / (1.0 - ab),
        PosteriorVariance::Beta => beta,
    }
    .sqrt();
    Ok(pred
        .x0
        .iter()
        .zip(x_t)
        .map(|(x0, x)| {
            let z: f64 = rng.sample(StandardNormal);
            c0 * x0 + ct * x + sigma * z
        })
        .collect())
}

/// One DDIM step `x_t -> x_{t_prev}`; `None` ends the chain at the clean
/// prediction. `eta = 0` is deterministic and never touches `rng`.
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &[f64],
    t: usize,
    t_prev: Option<usize>,
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    let pred = denoise(x_t, t, denoiser, sched)?;
    let Some(tp) = t_prev else {
        return Ok(pred.x0);
    };
    if tp >= t {
        return Err(DiffusionError::InvalidTimestep { t: tp, timesteps: t });
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(tp);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    Ok(pred
        .x0
        .iter()
        .zip(&pred.eps)
        .map(|(x0, e)| {
            let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            ab_prev.sqrt() * x0 + dir * e + noise
        })
        .collect())
}

/// Full ancestral chain from `x_T` at the last timestep down to a clean
/// sample.
pub fn sample_ddpm<R: Rng + ?Sized>(
    x_last: &[f64],
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    variance: PosteriorVariance,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    let mut x = x_last.to_vec();
    for t in (0..sched.timesteps).rev() {
        x = ddpm_step(&x, t, denoiser, sched, variance, rng)?;
    }
    Ok(x)
}

/// `steps` timesteps evenly spaced from the last one down to 0.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > timesteps {
        return Err(DiffusionError::InvalidRange(format!("{steps} steps from a {timesteps}-step schedule")));
    }
    if steps == 1 {
        return Ok(vec![timesteps - 1]);
    }
    let last = (timesteps - 1) as f64;
    Ok((0..steps).rev().map(|i| (i as f64 * last / (steps - 1) as f64).round() as usize).collect())
}

/// Deterministic DDIM through `timesteps` (descending). With `finish` the
/// result is the clean prediction at the last listed timestep, otherwise the
/// state at that timestep.
pub fn ddim_chain(
    x: &[f64],
    timesteps: &[usize],
    finish: bool,
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
    let mut x = x.to_vec();
    for (i, &t) in timesteps.iter().enumerate() {
        match timesteps.get(i + 1) {
            Some(&tp) => x = ddim_step(&x, t, Some(tp), denoiser, sched, 0.0, &mut rng)?,
            None if finish => x = ddim_step(&x, t, None, denoiser, sched, 0.0, &mut rng)?,
            None => {}
        }
    }
    Ok(x)
}

/// Deterministic DDIM sampler with `steps` evenly spaced timesteps.
pub fn sample_ddim(x_last: &[f64], steps: usize, denoiser: &dyn Denoiser, sched: &DiffusionSchedule) -> Result<Vec<f64>, DiffusionError> {
    let ts = ddim_timesteps(sched.timesteps, steps)?;
    ddim_chain(x_last, &ts, true, denoiser, sched)
}

/// `decay * ema + (1 - decay) * current`.
pub fn ema_update(ema: &[f64], current: &[f64], decay: f64) -> Result<Vec<f64>, DiffusionError> {
    same_len(ema, current)?;
    Ok(ema.iter().zip(current).map(|(e, c)| decay * e + (1.0 - decay) * c).collect())
}

/// Exponential moving average applied every `update_every` observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub params: Vec<f64>,
    pub decay: f64,
    pub update_every: usize,
    step: usize,
}

impl Ema {
    pub fn new(params: Vec<f64>, decay: f64, update_every: usize) -> Self {
        Self { params, decay, update_every: update_every.max(1), step: 0 }
    }

    /// Counts one optimizer step; returns whether the average was updated.
    pub fn observe(&mut self, current: &[f64]) -> Result<bool, DiffusionError> {
        same_len(&self.params, current)?;
        self.step += 1;
        if !self.step.is_multiple_of(self.update_every) {
            return Ok(false);
        }
        self.params = ema_update(&self.params, current, self.decay)?;
        Ok(true)
    }
}

/// Source-frame indices of one training or inference clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndexPlan {
    pub indices: Vec<usize>,
}

fn check_range(video_len: usize, start: usize, frames: usize) -> Result<(), DiffusionError> {
    if video_len == 0 {
        return Err(DiffusionError::InvalidRange("empty video".into()));
    }
    if start >= video_len {
        return Err(DiffusionError::InvalidRange(format!("start {start} beyond video of {video_len} frames")));
    }
    if frames == 0 {
        return Err(DiffusionError::InvalidRange("clip needs at least one frame".into()));
    }
    Ok(())
}

/// `start`, then evenly spaced frames to the last one (rounded half up).
pub fn adaptive_frames(video_len: usize, start: usize, frames: usize) -> Result<FrameIndexPlan, DiffusionError> {
    check_range(video_len, start, frames)?;
    let last = video_len - 1;
    if frames == 1 {
        return Ok(FrameIndexPlan { indices: vec![last] });
    }
    let span = (last - start) as f64;
    let mut prev = start;
    let indices = (0..frames)
        .map(|j| {
            let idx = if j == frames - 1 {
                last
            } else {
                (start as f64 + j as f64 * span / (frames - 1) as f64 + 0.5).floor() as usize
            };
            prev = idx.clamp(prev, last);
            prev
        })
        .collect();
    Ok(FrameIndexPlan { indices })
}

/// Adaptive plan from a uniformly drawn current frame.
pub fn sample_frames_adaptive<R: Rng + ?Sized>(video_len: usize, frames: usize, rng: &mut R) -> Result<FrameIndexPlan, DiffusionError> {
    check_range(video_len, 0, frames)?;
    adaptive_frames(video_len, rng.random_range(0..video_len), frames)
}

/// `start..start + frames`, repeating the last frame past the end.
pub fn sample_frames_consecutive(video_len: usize, start: usize, frames: usize) -> Result<FrameIndexPlan, DiffusionError> {
    check_range(video_len, start, frames)?;
    Ok(FrameIndexPlan { indices: (start..start + frames).map(|i| i.min(video_len - 1)).collect() })
}
