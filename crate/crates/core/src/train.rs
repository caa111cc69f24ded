//! Alternating optimisation of the Gaussian cloud and the camera poses.
//!
//! Iteration `t` (1-based) refines every pose with LK3D against the frozen
//! cloud when `t % k == 0 && t <= m`, and otherwise takes one Adam step on
//! the cloud for the next view of a shuffled epoch with the poses frozen.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::ImageBuffer;
use crate::lk3d::{refine_all_poses, ColorTarget, LkConfig, LkDiagnostics};
use crate::metrics::ssim_with_gradient;
use crate::render::{
    densify_and_prune, render, render_backward, CloudGradient, DensifyThresholds, GaussianCloud, GradientStats,
};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;
/// Parameters per Gaussian: position 3, log-scale 3, rotation 4, opacity 1, color 3.
const PARAMS: usize = 14;

/// Adam step sizes per parameter group. `position` and `position_final`
/// are fractions of the scene extent; the position rate decays
/// exponentially between them over the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 0.005,
            rotation: 0.001,
            opacity: 0.05,
            color: 0.0025,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            position_final: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            color: 0.0,
        }
    }

    fn position_at(&self, t: usize, total: usize) -> f64 {
        if self.position <= 0.0 || self.position_final <= 0.0 {
            return self.position;
        }
        let f = (t as f64 / total.max(1) as f64).clamp(0.0, 1.0);
        (self.position.ln() * (1.0 - f) + self.position_final.ln() * f).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `T_G`.
    pub total_iterations: usize,
    /// `k`.
    pub pose_interval: usize,
    /// `m`; zero disables pose refinement.
    pub pose_cutoff: usize,
    /// Weight of the D-SSIM term.
    pub lambda: f64,
    pub learning_rates: LearningRates,
    /// Densify after every this many Gaussian steps; zero disables it.
    pub densify_interval: usize,
    /// No densification after this iteration.
    pub densify_until: usize,
    /// Screen-space gradient threshold in normalised device units.
    pub densify_grad_threshold: f64,
    pub lk: LkConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_total(3000)
    }
}

impl TrainConfig {
    /// Defaults for a run of `total` iterations: `k = 100`, `m = total / 4`.
    pub fn with_total(total: usize) -> Self {
        Self {
            total_iterations: total,
            pose_interval: 100,
            pose_cutoff: total / 4,
            lambda: 0.2,
            learning_rates: LearningRates::default(),
            densify_interval: 100,
            densify_until: total / 2,
            densify_grad_threshold: 0.001,
            lk: LkConfig {
                color_target: ColorTarget::Rendered,
                ..LkConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, k, m) = (self.total_iterations, self.pose_interval, self.pose_cutoff);
        if t == 0 {
            return Err(Error::Config("total_iterations must be at least 1".into()));
        }
        if k == 0 {
            return Err(Error::Config("pose_interval must be at least 1".into()));
        }
        if m > t {
            return Err(Error::Config(format!("pose_cutoff {m} exceeds total_iterations {t}")));
        }
        if m != 0 && k > m {
            return Err(Error::Config(format!("pose_interval {k} exceeds pose_cutoff {m}")));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        let lr = &self.learning_rates;
        for (name, v) in [
            ("position", lr.position),
            ("position_final", lr.position_final),
            ("log_scale", lr.log_scale),
            ("rotation", lr.rotation),
            ("opacity", lr.opacity),
            ("color", lr.color),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "learning rate `{name}` must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.densify_grad_threshold > 0.0) {
            return Err(Error::Config("densify_grad_threshold must be positive".into()));
        }
        self.lk
            .validate()
            .map_err(|e| Error::Config(format!("pose refinement settings: {e}")))
    }

    /// Whether iteration `t` (1-based) is a pose iteration.
    pub fn is_pose_iteration(&self, t: usize) -> bool {
        self.pose_cutoff > 0 && t % self.pose_interval == 0 && t <= self.pose_cutoff
    }
}

/// Adam moments, one row of [`PARAMS`] values per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: Vec<[f64; PARAMS]>,
    pub second: Vec<[f64; PARAMS]>,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        Self {
            first: vec![[0.0; PARAMS]; n],
            second: vec![[0.0; PARAMS]; n],
            step: 0,
        }
    }

    /// Keep rows of surviving Gaussians; new ones start from zero.
    fn remap(&mut self, origin: &[Option<usize>]) {
        let pick = |rows: &[[f64; PARAMS]]| origin.iter().map(|o| o.map_or([0.0; PARAMS], |i| rows[i])).collect();
        self.first = pick(&self.first);
        self.second = pick(&self.second);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub poses: Vec<CameraPose>,
    /// Last completed iteration.
    pub iteration: usize,
    /// `(iteration, loss)` for every Gaussian step.
    pub loss_history: Vec<(usize, f64)>,
    pub moments: AdamMoments,
    pub grad_stats: GradientStats,
    /// Extent of the initial cloud; scales position steps and densification.
    pub scene_extent: f64,
    gaussian_steps: usize,
    epoch_order: Vec<usize>,
    epoch_pos: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud, poses: Vec<CameraPose>, seed: u64) -> Self {
        let n = cloud.len();
        let extent = cloud.extent();
        Self {
            moments: AdamMoments::new(n),
            grad_stats: GradientStats::new(n),
            scene_extent: if extent > 0.0 { extent } else { 1.0 },
            cloud,
            poses,
            iteration: 0,
            loss_history: Vec::new(),
            gaussian_steps: 0,
            epoch_order: Vec::new(),
            epoch_pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_view(&mut self) -> usize {
        if self.epoch_pos >= self.epoch_order.len() {
            self.epoch_order = (0..self.poses.len()).collect();
            self.epoch_order.shuffle(&mut self.rng);
            self.epoch_pos = 0;
        }
        let v = self.epoch_order[self.epoch_pos];
        self.epoch_pos += 1;
        v
    }
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM) / 2`.
pub fn photometric_loss(rendered: &ImageBuffer, target: &ImageBuffer, lambda: f64) -> Result<f64> {
    Ok(loss_and_gradient(rendered, target, lambda, false)?.0)
}

fn loss_and_gradient(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    lambda: f64,
    want_grad: bool,
) -> Result<(f64, Option<ImageBuffer>)> {
    if !rendered.same_shape(target) {
        return Err(Error::InvalidArgument(format!(
            "rendered image is {:?} but target is {:?}",
            rendered.dimensions(),
            target.dimensions()
        )));
    }
    let n = rendered.data().len() as f64;
    let l1 = rendered
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    if lambda == 0.0 {
        let grad = want_grad.then(|| {
            let (w, h) = rendered.dimensions();
            let g = rendered
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| sign(a - b) / n)
                .collect();
            ImageBuffer::from_raw(w, h, g).expect("shape")
        });
        return Ok((l1, grad));
    }
    let (ssim, d_ssim) = ssim_with_gradient(rendered, target)?;
    let loss = (1.0 - lambda) * l1 + lambda * 0.5 * (1.0 - ssim);
    let grad = want_grad.then(|| {
        let (w, h) = rendered.dimensions();
        let g = rendered
            .data()
            .iter()
            .zip(target.data())
            .zip(d_ssim.data())
            .map(|((a, b), ds)| (1.0 - lambda) * sign(a - b) / n - 0.5 * lambda * ds)
            .collect();
        ImageBuffer::from_raw(w, h, g).expect("shape")
    });
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn divergence(state: &TrainState, iteration: usize, reason: String) -> Error {
    Error::Divergence {
        iteration,
        reason,
        snapshot: Some(Box::new(state.clone())),
    }
}

fn adam_update(param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
    if lr > 0.0 {
        *param -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}

fn apply_adam(state: &mut TrainState, grad: &CloudGradient, config: &TrainConfig, iteration: usize) {
    let lr = &config.learning_rates;
    let pos_lr = lr.position_at(iteration, config.total_iterations) * state.scene_extent;
    let rates = [
        pos_lr,
        pos_lr,
        pos_lr,
        lr.log_scale,
        lr.log_scale,
        lr.log_scale,
        lr.rotation,
        lr.rotation,
        lr.rotation,
        lr.rotation,
        lr.opacity,
        lr.color,
        lr.color,
        lr.color,
    ];
    state.moments.step += 1;
    let t = state.moments.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, g) in state.cloud.gaussians.iter_mut().enumerate() {
        let grads = [
            grad.position[i].x,
            grad.position[i].y,
            grad.position[i].z,
            grad.log_scale[i].x,
            grad.log_scale[i].y,
            grad.log_scale[i].z,
            grad.rotation[i][0],
            grad.rotation[i][1],
            grad.rotation[i][2],
            grad.rotation[i][3],
            grad.opacity_logit[i],
            grad.color[i].x,
            grad.color[i].y,
            grad.color[i].z,
        ];
        let mut params = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        let m = &mut state.moments.first[i];
        let v = &mut state.moments.second[i];
        for p in 0..PARAMS {
            adam_update(&mut params[p], grads[p], &mut m[p], &mut v[p], rates[p], c1, c2);
        }
        g.position = Vector3::new(params[0], params[1], params[2]);
        g.log_scale = Vector3::new(params[3], params[4], params[5]);
        g.rotation = [params[6], params[7], params[8], params[9]];
        g.opacity_logit = params[10];
        g.color = Vector3::new(params[11], params[12], params[13]);
    }
}

/// One Adam step on the cloud against view `view` with the poses frozen.
/// Returns the loss before the step.
pub fn gaussian_step(
    state: &mut TrainState,
    images: &[ImageBuffer],
    k: &CameraIntrinsics,
    view: usize,
    config: &TrainConfig,
) -> Result<f64> {
    if view >= state.poses.len() || view >= images.len() {
        return Err(Error::InvalidArgument(format!("view {view} out of range")));
    }
    let iteration = state.iteration + 1;
    let pose = state.poses[view];
    let out = render(&state.cloud, &pose, k);
    let (loss, d_image) = loss_and_gradient(&out.image, &images[view], config.lambda, true)?;
    if !loss.is_finite() {
        return Err(divergence(state, iteration, format!("non-finite loss on view {view}")));
    }
    let grad = render_backward(&state.cloud, &pose, k, &d_image.expect("gradient requested"))?;
    state.grad_stats.accumulate(&grad, &out);
    apply_adam(state, &grad, config, iteration);
    if !state.cloud.is_finite() {
        return Err(divergence(
            state,
            iteration,
            "non-finite Gaussian parameters after update".into(),
        ));
    }
    state.loss_history.push((iteration, loss));
    state.gaussian_steps += 1;
    Ok(loss)
}

fn maybe_densify(state: &mut TrainState, config: &TrainConfig, iteration: usize, k: &CameraIntrinsics) -> bool {
    if config.densify_interval == 0
        || iteration > config.densify_until
        || state.gaussian_steps % config.densify_interval != 0
    {
        return false;
    }
    let mut thresholds = DensifyThresholds::for_extent(state.scene_extent);
    // Normalised device units span half the image per unit.
    thresholds.grad_threshold = config.densify_grad_threshold / (0.5 * k.width.max(k.height) as f64);
    let result = densify_and_prune(&state.cloud, &state.grad_stats, &thresholds, &mut state.rng);
    state.moments.remap(&result.origin);
    state.cloud = result.cloud;
    state.grad_stats = GradientStats::new(state.cloud.len());
    true
}

/// What happened at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Phase {
    Gaussian { view: usize, loss: f64, densified: bool },
    Pose { diagnostics: Vec<LkDiagnostics> },
}

/// Runs iterations `state.iteration + 1 ..= T_G`, calling `observer`
/// after each one.
pub fn train_with_observer(
    images: &[ImageBuffer],
    k: &CameraIntrinsics,
    mut state: TrainState,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, &Phase, &TrainState),
) -> Result<TrainState> {
    config.validate()?;
    if images.len() != state.poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} poses",
            images.len(),
            state.poses.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if state.moments.first.len() != state.cloud.len() {
        return Err(Error::InvalidArgument(
            "optimizer state does not match the cloud".into(),
        ));
    }
    for t in state.iteration + 1..=config.total_iterations {
        let phase = if config.is_pose_iteration(t) {
            let refined = refine_all_poses(&state.cloud, &state.poses, k, images, &config.lk).map_err(|e| match e {
                Error::InvalidArgument(_) | Error::Config(_) => e,
                other => divergence(&state, t, format!("pose refinement failed: {other}")),
            })?;
            let (poses, diagnostics): (Vec<_>, Vec<_>) = refined.into_iter().unzip();
            if poses.iter().any(|p| !p.is_finite()) {
                return Err(divergence(
                    &state,
                    t,
                    "pose refinement produced a non-finite pose".into(),
                ));
            }
            state.poses = poses;
            state.iteration = t;
            Phase::Pose { diagnostics }
        } else {
            let view = state.next_view();
            let loss = gaussian_step(&mut state, images, k, view, config)?;
            state.iteration = t;
            let densified = maybe_densify(&mut state, config, t, k);
            Phase::Gaussian { view, loss, densified }
        };
        observer(t, &phase, &state);
    }
    Ok(state)
}

pub fn train(
    images: &[ImageBuffer],
    k: &CameraIntrinsics,
    state: TrainState,
    config: &TrainConfig,
) -> Result<TrainState> {
    train_with_observer(images, k, state, config, &mut |_, _, _| {})
}
