//! End-to-end driver: initialise with SfM, run the joint optimisation,
//! evaluate held-out views and write the artifacts.

use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, ErrorClass, Result};
use crate::geometry::CameraPose;
use crate::image::ImageBuffer;
use crate::io::{self, Dataset, SplitRatio};
use crate::lk3d::{refine_pose, ColorTarget, LkDiagnostics};
use crate::metrics::{compute_ate, compute_psnr, compute_rpe, compute_ssim, umeyama, Trajectory};
use crate::render::{render, GaussianCloud};
use crate::sfm::{exact_correspondences, reconstruct_from_features, run_initialization, seed_gaussians, SfmConfig};
use crate::synthetic::{generate_synthetic_scene, SyntheticSceneSpec};
use crate::train::{train_with_observer, Phase, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Initialization,
    Training,
    Evaluation,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Initialization => "initialization",
            Stage::Training => "training",
            Stage::Evaluation => "evaluation",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl PipelineError {
    pub fn new(stage: Stage, source: Error) -> Self {
        Self { stage, source }
    }

    /// 1 for configuration problems, 2 for bad input data, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        if self.stage == Stage::Config {
            return 1;
        }
        match self.source.class() {
            ErrorClass::Config => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// Where the SfM correspondences come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correspondences {
    /// Detected and matched features.
    Detected,
    /// Projections of the known scene geometry; synthetic data only.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub sfm: SfmConfig,
    pub split: SplitRatio,
    pub correspondences: Correspondences,
    /// Opacity of the Gaussians seeded from SfM points.
    pub init_opacity: f64,
    /// Rotation added to every initial pose about each Euler axis, degrees.
    pub init_rotation_noise_deg: f64,
    /// Translation added to every initial pose, as a fraction of the cloud extent.
    pub init_translation_noise: f64,
    /// Registration passes for held-out views; zero keeps the transferred pose.
    pub test_pose_rounds: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            sfm: SfmConfig::default(),
            split: SplitRatio::default(),
            correspondences: Correspondences::Detected,
            init_opacity: 0.1,
            init_rotation_noise_deg: 0.0,
            init_translation_noise: 0.0,
            test_pose_rounds: 10,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl PipelineConfig {
    /// Applies `key = value` settings. `iterations` resets the pose cutoff
    /// and densification window to their defaults for that length unless
    /// those keys are also given.
    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<()> {
        if let Some((_, v)) = entries.iter().find(|(k, _)| k == "iterations") {
            let total: usize = parse_num("iterations", v)?;
            let fresh = TrainConfig::with_total(total);
            self.train.total_iterations = total;
            self.train.pose_cutoff = fresh.pose_cutoff;
            self.train.densify_until = fresh.densify_until;
        }
        for (key, v) in entries {
            let (t, s) = (&mut self.train, &mut self.sfm);
            match key.as_str() {
                "iterations" => {}
                "pose_interval" => t.pose_interval = parse_num(key, v)?,
                "pose_cutoff" => t.pose_cutoff = parse_num(key, v)?,
                "lambda" => t.lambda = parse_num(key, v)?,
                "lr_position" => t.learning_rates.position = parse_num(key, v)?,
                "lr_position_final" => t.learning_rates.position_final = parse_num(key, v)?,
                "lr_scale" => t.learning_rates.log_scale = parse_num(key, v)?,
                "lr_rotation" => t.learning_rates.rotation = parse_num(key, v)?,
                "lr_opacity" => t.learning_rates.opacity = parse_num(key, v)?,
                "lr_color" => t.learning_rates.color = parse_num(key, v)?,
                "densify_interval" => t.densify_interval = parse_num(key, v)?,
                "densify_until" => t.densify_until = parse_num(key, v)?,
                "densify_grad_threshold" => t.densify_grad_threshold = parse_num(key, v)?,
                "lk_iterations" => t.lk.max_iterations = parse_num(key, v)?,
                "lk_step_scale" => t.lk.step_scale = parse_num(key, v)?,
                "lk_damping" => t.lk.damping = parse_num(key, v)?,
                "lk_tolerance" => t.lk.convergence_tol = parse_num(key, v)?,
                "lk_visibility" => t.lk.visibility_threshold = parse_num(key, v)?,
                "lk_color_target" => {
                    t.lk.color_target = match v.as_str() {
                        "base" => ColorTarget::Base,
                        "rendered" => ColorTarget::Rendered,
                        _ => {
                            return Err(Error::Config(format!(
                                "lk_color_target must be `base` or `rendered`, got `{v}`"
                            )))
                        }
                    }
                }
                "sfm_ratio" => s.ratio = parse_num(key, v)?,
                "sfm_ransac_iterations" => s.ransac_iterations = parse_num(key, v)?,
                "sfm_ransac_threshold" => s.ransac_threshold = parse_num(key, v)?,
                "sfm_pnp_threshold" => s.pnp_threshold = parse_num(key, v)?,
                "sfm_min_pair_inliers" => s.min_pair_inliers = parse_num(key, v)?,
                "sfm_min_registration_points" => s.min_registration_points = parse_num(key, v)?,
                "sfm_max_reprojection_error" => s.max_reprojection_error = parse_num(key, v)?,
                "sfm_ba_iterations" => s.ba_iterations = parse_num(key, v)?,
                "sfm_huber_delta" => s.huber_delta = parse_num(key, v)?,
                "split" => self.split = SplitRatio::parse(v)?,
                "correspondences" => {
                    self.correspondences = match v.as_str() {
                        "detected" => Correspondences::Detected,
                        "exact" => Correspondences::Exact,
                        _ => {
                            return Err(Error::Config(format!(
                                "correspondences must be `detected` or `exact`, got `{v}`"
                            )))
                        }
                    }
                }
                "init_opacity" => self.init_opacity = parse_num(key, v)?,
                "init_rotation_noise_deg" => self.init_rotation_noise_deg = parse_num(key, v)?,
                "init_translation_noise" => self.init_translation_noise = parse_num(key, v)?,
                "test_pose_rounds" => self.test_pose_rounds = parse_num(key, v)?,
                "seed" => self.set_seed(parse_num(key, v)?),
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&io::read_key_values(path)?)?;
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.sfm.seed = seed;
    }

    /// Every setting, in a form [`PipelineConfig::apply`] reads back.
    pub fn to_entries(&self) -> Vec<(String, String)> {
        let (t, s, lr) = (&self.train, &self.sfm, &self.train.learning_rates);
        let mut e = vec![
            ("iterations", t.total_iterations.to_string()),
            ("pose_interval", t.pose_interval.to_string()),
            ("pose_cutoff", t.pose_cutoff.to_string()),
            ("lambda", t.lambda.to_string()),
            ("lr_position", lr.position.to_string()),
            ("lr_position_final", lr.position_final.to_string()),
            ("lr_scale", lr.log_scale.to_string()),
            ("lr_rotation", lr.rotation.to_string()),
            ("lr_opacity", lr.opacity.to_string()),
            ("lr_color", lr.color.to_string()),
            ("densify_interval", t.densify_interval.to_string()),
            ("densify_until", t.densify_until.to_string()),
            ("densify_grad_threshold", t.densify_grad_threshold.to_string()),
            ("lk_iterations", t.lk.max_iterations.to_string()),
            ("lk_step_scale", t.lk.step_scale.to_string()),
            ("lk_damping", t.lk.damping.to_string()),
            ("lk_tolerance", t.lk.convergence_tol.to_string()),
            ("lk_visibility", t.lk.visibility_threshold.to_string()),
            (
                "lk_color_target",
                match t.lk.color_target {
                    ColorTarget::Base => "base",
                    ColorTarget::Rendered => "rendered",
                }
                .to_string(),
            ),
            ("sfm_ratio", s.ratio.to_string()),
            ("sfm_ransac_iterations", s.ransac_iterations.to_string()),
            ("sfm_ransac_threshold", s.ransac_threshold.to_string()),
            ("sfm_pnp_threshold", s.pnp_threshold.to_string()),
            ("sfm_min_pair_inliers", s.min_pair_inliers.to_string()),
            ("sfm_min_registration_points", s.min_registration_points.to_string()),
            ("sfm_max_reprojection_error", s.max_reprojection_error.to_string()),
            ("sfm_ba_iterations", s.ba_iterations.to_string()),
            ("sfm_huber_delta", s.huber_delta.to_string()),
            ("split", self.split.to_string()),
            (
                "correspondences",
                match self.correspondences {
                    Correspondences::Detected => "detected",
                    Correspondences::Exact => "exact",
                }
                .to_string(),
            ),
            ("init_opacity", self.init_opacity.to_string()),
            ("init_rotation_noise_deg", self.init_rotation_noise_deg.to_string()),
            ("init_translation_noise", self.init_translation_noise.to_string()),
            ("test_pose_rounds", self.test_pose_rounds.to_string()),
            ("seed", self.seed.to_string()),
        ];
        e.drain(..).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sfm.validate()?;
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Config(format!(
                "init_opacity must lie in (0, 1), got {}",
                self.init_opacity
            )));
        }
        for (name, v) in [
            ("init_rotation_noise_deg", self.init_rotation_noise_deg),
            ("init_translation_noise", self.init_translation_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Renders a synthetic scene and wraps it as a dataset with its
/// ground-truth trajectory and geometry attached.
pub fn synthetic_dataset(spec: &SyntheticSceneSpec, split: SplitRatio) -> Result<Dataset> {
    let scene = generate_synthetic_scene(spec)?;
    let names = (0..scene.images.len()).map(|i| format!("view_{i:03}")).collect();
    let mut d = Dataset::from_images(
        format!("synthetic-{}", spec.seed),
        names,
        scene.images,
        scene.intrinsics,
        split,
    )?;
    d.reference = Some(scene.poses);
    d.ground_truth_cloud = Some(scene.cloud);
    Ok(d)
}

/// Image-quality and trajectory metrics. Missing quantities are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestView {
    pub index: usize,
    pub pose: CameraPose,
    pub render: ImageBuffer,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub test_views: Vec<TestView>,
}

/// One pose-phase record per view.
#[derive(Debug, Clone, PartialEq)]
pub struct LkTraceRow {
    pub iteration: usize,
    pub view: usize,
    pub diagnostics: LkDiagnostics,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    /// Dataset indices of the registered training images, in training order.
    pub registered: Vec<usize>,
    pub unregistered: Vec<usize>,
    pub sfm_reprojection_error: f64,
    /// ATE of the initial poses, when a reference exists.
    pub initial_ate: Option<f64>,
    pub state: TrainState,
    pub evaluation: Evaluation,
    /// `(iteration, ATE)` at the start and after every pose phase.
    pub pose_error: Vec<(usize, f64)>,
    pub lk_trace: Vec<LkTraceRow>,
}

impl PipelineReport {
    pub fn trajectory(&self) -> Vec<(usize, CameraPose)> {
        self.registered
            .iter()
            .copied()
            .zip(self.state.poses.iter().copied())
            .collect()
    }
}

fn perturb_poses(poses: &mut [CameraPose], rotation_deg: f64, translation: f64, seed: u64) {
    if rotation_deg == 0.0 && translation == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9e55);
    let d = rotation_deg.to_radians();
    for p in poses {
        let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (a, b, c) = (sign(), sign(), sign());
        let dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize() * translation;
        *p = p.apply_increment(&Vector6::new(a * d, b * d, c * d, dir.x, dir.y, dir.z), 1.0);
    }
}

fn ate_against(reference: &[CameraPose], estimated: &[(usize, CameraPose)]) -> Result<f64> {
    let est = Trajectory::from_poses(estimated.iter().map(|(_, p)| *p).collect());
    let reference = Trajectory::from_poses(estimated.iter().map(|(i, _)| reference[*i]).collect());
    compute_ate(&est, &reference)
}

/// Full run: SfM, joint optimisation, evaluation and, when `out` is given,
/// the artifacts.
pub fn run_pipeline(
    dataset: &Dataset,
    config: &PipelineConfig,
    out: Option<&Path>,
) -> std::result::Result<PipelineReport, PipelineError> {
    config.validate().at(Stage::Config)?;
    if config.correspondences == Correspondences::Exact
        && (dataset.ground_truth_cloud.is_none() || dataset.reference.is_none())
    {
        return Err(PipelineError::new(
            Stage::Config,
            Error::Config("exact correspondences need a synthetic dataset with known geometry".into()),
        ));
    }
    let k = dataset.intrinsics;
    let train_images = dataset.train_images();

    info!("initialising from {} training images", train_images.len());
    let recon = match config.correspondences {
        Correspondences::Detected => run_initialization(&train_images, &k, &config.sfm),
        Correspondences::Exact => {
            let reference = dataset.reference.as_ref().expect("checked above");
            let cloud = dataset.ground_truth_cloud.as_ref().expect("checked above");
            let poses: Vec<CameraPose> = dataset.train.iter().map(|&i| reference[i]).collect();
            let features = exact_correspondences(cloud, &poses, &k, config.seed);
            reconstruct_from_features(&features, &train_images, &k, &config.sfm)
        }
    }
    .at(Stage::Initialization)?;
    let local: Vec<usize> = recon.registered();
    let registered: Vec<usize> = local.iter().map(|&j| dataset.train[j]).collect();
    let unregistered: Vec<usize> = dataset
        .train
        .iter()
        .copied()
        .filter(|i| !registered.contains(i))
        .collect();
    if !unregistered.is_empty() {
        warn!("images {unregistered:?} could not be registered and are left out of training");
    }
    let sfm_reprojection_error = recon.mean_reprojection_error(&k);
    info!(
        "registered {}/{} images, {} points, mean reprojection error {:.4} px",
        registered.len(),
        dataset.train.len(),
        recon.points.len(),
        sfm_reprojection_error
    );
    let cloud = seed_gaussians(&recon, config.init_opacity).at(Stage::Initialization)?;
    let mut poses: Vec<CameraPose> = recon.poses.values().copied().collect();
    perturb_poses(
        &mut poses,
        config.init_rotation_noise_deg,
        config.init_translation_noise * cloud.extent(),
        config.seed,
    );
    let images: Vec<ImageBuffer> = local.iter().map(|&j| train_images[j].clone()).collect();

    let reference = dataset.reference.as_deref();
    let ate_of = |poses: &[CameraPose]| -> Option<f64> {
        let est: Vec<(usize, CameraPose)> = registered.iter().copied().zip(poses.iter().copied()).collect();
        reference.and_then(|r| ate_against(r, &est).ok())
    };
    let initial_ate = ate_of(&poses);
    let mut pose_error: Vec<(usize, f64)> = initial_ate.map(|a| vec![(0, a)]).unwrap_or_default();
    let mut lk_trace = Vec::new();

    let state = TrainState::new(cloud, poses, config.seed);
    let trained = train_with_observer(&images, &k, state, &config.train, &mut |t, phase, st| {
        if let Phase::Pose { diagnostics } = phase {
            if let Some(a) = ate_of(&st.poses) {
                pose_error.push((t, a));
            }
            for (view, d) in diagnostics.iter().enumerate() {
                lk_trace.push(LkTraceRow {
                    iteration: t,
                    view: registered[view],
                    diagnostics: d.clone(),
                });
            }
        }
    });
    let state = match trained {
        Ok(s) => s,
        Err(Error::Divergence {
            iteration,
            reason,
            snapshot,
        }) => {
            if let (Some(out), Some(snap)) = (out, snapshot.as_deref()) {
                let dir = out.join("divergence");
                let saved = io::ensure_dir(&dir).and_then(|_| write_checkpoint(&dir, snap, &registered, config));
                match saved {
                    Ok(()) => warn!("wrote the last finite state to {}", dir.display()),
                    Err(e) => warn!("could not save the divergence snapshot: {e}"),
                }
            }
            return Err(PipelineError::new(
                Stage::Training,
                Error::Divergence {
                    iteration,
                    reason,
                    snapshot: None,
                },
            ));
        }
        Err(e) => return Err(PipelineError::new(Stage::Training, e)),
    };

    let estimated: Vec<(usize, CameraPose)> = registered.iter().copied().zip(state.poses.iter().copied()).collect();
    let evaluation = evaluate(dataset, &state.cloud, &estimated, config).at(Stage::Evaluation)?;
    let report = PipelineReport {
        registered,
        unregistered,
        sfm_reprojection_error,
        initial_ate,
        state,
        evaluation,
        pose_error,
        lk_trace,
    };
    if let Some(out) = out {
        export(out, dataset, config, &report).at(Stage::Export)?;
    }
    Ok(report)
}

/// Evaluates a saved checkpoint directory (`cloud.ply` and
/// `trajectory.txt`) against `dataset`.
pub fn run_evaluation(
    dataset: &Dataset,
    config: &PipelineConfig,
    checkpoint: &Path,
    out: Option<&Path>,
) -> std::result::Result<Evaluation, PipelineError> {
    config.validate().at(Stage::Config)?;
    let cloud = io::import_cloud_ply(&checkpoint.join(CLOUD_FILE)).at(Stage::Load)?;
    let trajectory = io::read_trajectory(&checkpoint.join(TRAJECTORY_FILE)).at(Stage::Load)?;
    if let Some((id, _)) = trajectory.iter().find(|(i, _)| *i >= dataset.images.len()) {
        return Err(PipelineError::new(
            Stage::Load,
            Error::InvalidArgument(format!(
                "checkpoint has a pose for image {id} but the dataset has {}",
                dataset.images.len()
            )),
        ));
    }
    let evaluation = evaluate(dataset, &cloud, &trajectory, config).at(Stage::Evaluation)?;
    if let Some(out) = out {
        (|| -> Result<()> {
            io::ensure_dir(out)?;
            write_metrics(&out.join(METRICS_FILE), &dataset.name, &evaluation.metrics)?;
            write_renders(out, dataset, &evaluation)
        })()
        .at(Stage::Export)?;
    }
    Ok(evaluation)
}

/// Pose of held-out view `j` in the estimated frame: the reference motion
/// from the nearest estimated view, with its translation rescaled.
fn transfer_pose(reference: &[CameraPose], estimated: &[(usize, CameraPose)], scale: f64, j: usize) -> CameraPose {
    let cj = reference[j].center();
    let (i, est_i) = estimated
        .iter()
        .min_by(|(a, _), (b, _)| {
            (reference[*a].center() - cj)
                .norm()
                .total_cmp(&(reference[*b].center() - cj).norm())
                .then(a.cmp(b))
        })
        .copied()
        .expect("at least one estimated pose");
    let (ri, rj) = (reference[i].rotation_matrix(), reference[j].rotation_matrix());
    let r_rel = rj * ri.transpose();
    let t_rel = reference[j].translation - r_rel * reference[i].translation;
    let r = r_rel * est_i.rotation_matrix();
    let t = r_rel * est_i.translation + scale * t_rel;
    CameraPose::from_rotation_translation(&r, t)
}

/// Registers held-out views, renders them and computes the metrics.
/// Held-out poses start from the reference motion relative to the nearest
/// training view and are then refined against the frozen cloud.
pub fn evaluate(
    dataset: &Dataset,
    cloud: &GaussianCloud,
    estimated: &[(usize, CameraPose)],
    config: &PipelineConfig,
) -> Result<Evaluation> {
    let k = dataset.intrinsics;
    let nan = f64::NAN;
    let mut metrics = EvalMetrics {
        psnr: nan,
        ssim: nan,
        ate: nan,
        rpe_trans: nan,
        rpe_rot_deg: nan,
    };
    let Some(reference) = dataset.reference.as_deref() else {
        warn!("no reference trajectory: trajectory errors and held-out views are not evaluated");
        return Ok(Evaluation {
            metrics,
            test_views: Vec::new(),
        });
    };
    if estimated.len() < 3 {
        warn!(
            "{} estimated poses are too few to align with the reference",
            estimated.len()
        );
        return Ok(Evaluation {
            metrics,
            test_views: Vec::new(),
        });
    }
    let est = Trajectory::from_poses(estimated.iter().map(|(_, p)| *p).collect());
    let refr = Trajectory::from_poses(estimated.iter().map(|(i, _)| reference[*i]).collect());
    metrics.ate = compute_ate(&est, &refr)?;
    let to_ref = umeyama(&est.centers(), &refr.centers(), true)?;
    let (rpe_t, rpe_r) = compute_rpe(&est.transformed(&to_ref), &refr, 1)?;
    metrics.rpe_trans = rpe_t;
    metrics.rpe_rot_deg = rpe_r;

    let scale = 1.0 / to_ref.scale;
    let mut lk = config.train.lk;
    lk.color_target = ColorTarget::Rendered;
    let test_views: Vec<TestView> = dataset
        .test
        .par_iter()
        .map(|&j| -> Result<TestView> {
            let mut pose = transfer_pose(reference, estimated, scale, j);
            for _ in 0..config.test_pose_rounds {
                let (next, _) = refine_pose(cloud, &pose, &k, &dataset.images[j], &lk)?;
                let moved = (next.to_vector() - pose.to_vector()).amax();
                pose = next;
                if moved < 1e-10 {
                    break;
                }
            }
            let image = render(cloud, &pose, &k).image;
            Ok(TestView {
                index: j,
                pose,
                psnr: compute_psnr(&image, &dataset.images[j])?,
                ssim: compute_ssim(&image, &dataset.images[j])?,
                render: image,
            })
        })
        .collect::<Result<_>>()?;
    if !test_views.is_empty() {
        let n = test_views.len() as f64;
        metrics.psnr = test_views.iter().map(|v| v.psnr).sum::<f64>() / n;
        metrics.ssim = test_views.iter().map(|v| v.ssim).sum::<f64>() / n;
    }
    Ok(Evaluation { metrics, test_views })
}

pub const CLOUD_FILE: &str = "cloud.ply";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const LK_TRACE_FILE: &str = "lk_trace.csv";
pub const POSE_ERROR_FILE: &str = "pose_error.csv";
pub const RENDER_DIR: &str = "renders";

/// Cloud, poses, resolved config and iteration count.
pub fn write_checkpoint(dir: &Path, state: &TrainState, registered: &[usize], config: &PipelineConfig) -> Result<()> {
    io::export_cloud_ply(&state.cloud, &dir.join(CLOUD_FILE))?;
    let entries: Vec<(usize, CameraPose)> = registered.iter().copied().zip(state.poses.iter().copied()).collect();
    io::write_trajectory(&entries, &dir.join(TRAJECTORY_FILE))?;
    io::write_key_values(&config.to_entries(), &dir.join(CONFIG_FILE))?;
    io::write_key_values(
        &[("iteration".into(), state.iteration.to_string())],
        &dir.join(CHECKPOINT_FILE),
    )
}

fn write_metrics(path: &Path, scene: &str, m: &EvalMetrics) -> Result<()> {
    io::write_csv(
        path,
        &["scene", "PSNR", "SSIM", "ATE", "RPE_trans", "RPE_rot"],
        &[vec![
            scene.to_string(),
            m.psnr.to_string(),
            m.ssim.to_string(),
            m.ate.to_string(),
            m.rpe_trans.to_string(),
            m.rpe_rot_deg.to_string(),
        ]],
    )
}

fn write_renders(out: &Path, dataset: &Dataset, evaluation: &Evaluation) -> Result<()> {
    if evaluation.test_views.is_empty() {
        return Ok(());
    }
    let dir = io::ensure_dir(&out.join(RENDER_DIR))?;
    for v in &evaluation.test_views {
        let stem = Path::new(&dataset.image_names[v.index])
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("view_{:03}", v.index));
        v.render.save(dir.join(format!("{stem}.png")))?;
    }
    Ok(())
}

fn export(out: &Path, dataset: &Dataset, config: &PipelineConfig, report: &PipelineReport) -> Result<()> {
    io::ensure_dir(out)?;
    write_checkpoint(out, &report.state, &report.registered, config)?;
    write_metrics(&out.join(METRICS_FILE), &dataset.name, &report.evaluation.metrics)?;
    let loss: Vec<(f64, f64)> = report.state.loss_history.iter().map(|&(t, l)| (t as f64, l)).collect();
    io::write_csv(
        &out.join(LOSS_FILE),
        &["iteration", "loss"],
        &report
            .state
            .loss_history
            .iter()
            .map(|(t, l)| vec![t.to_string(), l.to_string()])
            .collect::<Vec<_>>(),
    )?;
    io::write_line_chart(
        &out.join("loss.svg"),
        "Training loss",
        "iteration",
        "loss",
        &[("loss", &loss)],
    )?;
    io::write_csv(
        &out.join(LK_TRACE_FILE),
        &[
            "iteration",
            "view",
            "lk_iterations",
            "initial_cost",
            "final_cost",
            "converged",
            "active_gaussians",
        ],
        &report
            .lk_trace
            .iter()
            .map(|r| {
                let d = &r.diagnostics;
                vec![
                    r.iteration.to_string(),
                    r.view.to_string(),
                    d.iterations.to_string(),
                    d.cost_trace.first().copied().unwrap_or(f64::NAN).to_string(),
                    d.cost_trace.last().copied().unwrap_or(f64::NAN).to_string(),
                    d.converged.to_string(),
                    d.active_gaussians.to_string(),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    if !report.pose_error.is_empty() {
        io::write_csv(
            &out.join(POSE_ERROR_FILE),
            &["iteration", "ATE"],
            &report
                .pose_error
                .iter()
                .map(|(t, a)| vec![t.to_string(), a.to_string()])
                .collect::<Vec<_>>(),
        )?;
        let pts: Vec<(f64, f64)> = report.pose_error.iter().map(|&(t, a)| (t as f64, a)).collect();
        io::write_line_chart(
            &out.join("pose_error.svg"),
            "Pose error",
            "iteration",
            "ATE",
            &[("ATE", &pts)],
        )?;
    }
    write_renders(out, dataset, &report.evaluation)
}

/// Paths of the artifacts written by [`run_pipeline`].
pub fn artifact_paths(out: &Path) -> Vec<PathBuf> {
    [
        CLOUD_FILE,
        TRAJECTORY_FILE,
        CONFIG_FILE,
        CHECKPOINT_FILE,
        METRICS_FILE,
        LOSS_FILE,
        LK_TRACE_FILE,
        "loss.svg",
    ]
    .iter()
    .map(|f| out.join(f))
    .collect()
}
