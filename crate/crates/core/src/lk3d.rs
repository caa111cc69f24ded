//! Photometric pose refinement against Gaussian colors.
//!
//! For every visible Gaussian `g` the residual `l_g = c(g) - I(W(x_g; P))`
//! compares its color with the target image sampled at its projected
//! centre. Linearizing the image around the current pose gives per-channel
//! steepest-descent rows `d_g = grad I * dW/dP` and a 6x6 Gauss-Newton
//! system `H dP = b`, solved with a small Levenberg damping.

use log::{debug, warn};
use nalgebra::{Matrix3x6, Matrix6, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{projection_jacobian_at, CameraIntrinsics, CameraPose};
use crate::image::{ImageBuffer, ImageGradient};
use crate::render::{render, GaussianCloud};

/// Damping escalations attempted when the factorization fails.
const MAX_ESCALATIONS: usize = 4;
/// Consecutive rejected steps after which refinement gives up.
const MAX_REJECTIONS: usize = 8;
/// Gaussians whose initial projection lies this close to the image border
/// are left out so that small pose changes do not move them out of view.
const BORDER_MARGIN: f64 = 2.0;

/// What a Gaussian's color `c(g)` is compared against the target image with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorTarget {
    /// The Gaussian's own base color.
    #[default]
    Base,
    /// The color the cloud renders at the Gaussian's projected centre from
    /// the starting pose, fixed for the whole refinement.
    Rendered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkConfig {
    pub max_iterations: usize,
    /// Multiplier `eta` applied to all six increment components.
    pub step_scale: f64,
    /// Initial Levenberg damping on `diag(H)`.
    pub damping: f64,
    /// Refinement stops once `|eta dP|` falls below this.
    pub convergence_tol: f64,
    /// Minimum renderer visibility for a Gaussian to contribute.
    pub visibility_threshold: f64,
    pub color_target: ColorTarget,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_scale: 1.0,
            damping: 1e-4,
            convergence_tol: 1e-6,
            visibility_threshold: 0.05,
            color_target: ColorTarget::Base,
        }
    }
}

impl LkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("LK max_iterations must be at least 1".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::Config(format!(
                "LK step scale must be positive, got {}",
                self.step_scale
            )));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::Config(format!(
                "LK damping must be non-negative, got {}",
                self.damping
            )));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("LK convergence tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-Gaussian linearized photometric term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkResidual {
    pub gaussian_index: usize,
    /// `c(g) - I(W(x_g; P))` per channel.
    pub residual: Vector3<f64>,
    /// One row per channel: `[dI/du, dI/dv] * dW/dP`.
    pub steepest_rows: Matrix3x6<f64>,
    /// 0 excludes the term from the normal equations.
    pub weight: f64,
}

impl LkResidual {
    fn excluded(gaussian_index: usize) -> Self {
        Self {
            gaussian_index,
            residual: Vector3::zeros(),
            steepest_rows: Matrix3x6::zeros(),
            weight: 0.0,
        }
    }
}

pub fn image_gradient(image: &ImageBuffer) -> Result<ImageGradient> {
    image.gradient()
}

pub fn sample_bilinear(image: &ImageBuffer, pixel: &nalgebra::Vector2<f64>) -> Option<Vector3<f64>> {
    image.sample_bilinear(pixel)
}

/// Residuals for every Gaussian in `cloud`. A Gaussian contributes (weight 1)
/// when it is in front of the camera, projects inside the image and its
/// `visibility` (max blend weight from a forward render at `pose`) reaches
/// the configured threshold; all others get weight 0.
pub fn build_residuals(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    image: &ImageBuffer,
    gradients: &ImageGradient,
    visibility: &[f64],
    config: &LkConfig,
) -> Vec<LkResidual> {
    let active: Vec<bool> = (0..cloud.len())
        .map(|i| visibility.get(i).is_some_and(|&v| v >= config.visibility_threshold))
        .collect();
    let colors: Vec<Vector3<f64>> = cloud.gaussians.iter().map(|g| g.color).collect();
    linearize(cloud, pose, intrinsics, image, gradients, &active, &colors)
}

fn linearize(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    image: &ImageBuffer,
    gradients: &ImageGradient,
    active: &[bool],
    colors: &[Vector3<f64>],
) -> Vec<LkResidual> {
    let r = pose.rotation_matrix();
    cloud
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if !active[i] {
                return LkResidual::excluded(i);
            }
            let pc = r * g.position + pose.translation;
            if pc.z <= 0.0 {
                return LkResidual::excluded(i);
            }
            let pixel = nalgebra::Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
            let (Some(sample), Some((du, dv))) = (image.sample_bilinear(&pixel), gradients.sample(&pixel)) else {
                return LkResidual::excluded(i);
            };
            let jw = projection_jacobian_at(&g.position, &pc, pose, k);
            let mut rows = Matrix3x6::zeros();
            for c in 0..3 {
                rows.set_row(c, &(jw.row(0) * du[c] + jw.row(1) * dv[c]));
            }
            LkResidual {
                gaussian_index: i,
                residual: colors[i] - sample,
                steepest_rows: rows,
                weight: 1.0,
            }
        })
        .collect()
}

/// `H = sum w d^T d`, `b = sum w d^T l`. `H` is assembled on its upper
/// triangle and mirrored, so it is exactly symmetric.
pub fn assemble_normal_equations(residuals: &[LkResidual]) -> Result<(Matrix6<f64>, Vector6<f64>)> {
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut any = false;
    for res in residuals.iter().filter(|r| r.weight > 0.0) {
        any = true;
        let d = &res.steepest_rows;
        for row in 0..6 {
            for col in row..6 {
                h[(row, col)] += res.weight * d.column(row).dot(&d.column(col));
            }
        }
        b += res.weight * d.transpose() * res.residual;
    }
    if !any {
        return Err(Error::NoConstraints);
    }
    for row in 0..6 {
        for col in 0..row {
            h[(row, col)] = h[(col, row)];
        }
    }
    Ok((h, b))
}

/// Solves `(H + damping diag(H)) dP = b` by Cholesky, multiplying the
/// damping by 10 (at most four times) while the factorization fails.
pub fn solve_increment(h: &Matrix6<f64>, b: &Vector6<f64>, damping: f64) -> Result<Vector6<f64>> {
    let mut lambda = damping;
    for attempt in 0..=MAX_ESCALATIONS {
        if attempt > 0 {
            lambda *= 10.0;
        }
        let mut a = *h;
        for i in 0..6 {
            a[(i, i)] += lambda * h[(i, i)];
        }
        if let Some(chol) = a.cholesky() {
            let l = chol.l_dirty();
            let diag: Vec<f64> = (0..6).map(|i| l[(i, i)] * l[(i, i)]).collect();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            // Pivots at round-off level mean the system is numerically singular.
            if min > 1e-13 * max {
                let x = chol.solve(b);
                if x.iter().all(|v| v.is_finite()) {
                    return Ok(x);
                }
            }
        }
        if lambda == 0.0 {
            break;
        }
    }
    Err(Error::RankDeficient { damping: lambda })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LkWarning {
    /// No Gaussian passed the visibility gate.
    NoVisibleGaussians,
    /// The normal equations stayed singular (e.g. a textureless image).
    RankDeficient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LkDiagnostics {
    /// Photometric cost `sum |l_g|^2` at the current pose, starting with the
    /// initial pose and then after every iteration (unchanged on rejection).
    pub cost_trace: Vec<f64>,
    /// Whether each iteration's step was accepted.
    pub accepted: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of Gaussians that passed the visibility gate.
    pub active_gaussians: usize,
    pub warning: Option<LkWarning>,
}

/// Gauss-Newton refinement of one camera pose with the cloud held fixed.
/// The contributing set of Gaussians is decided once from a render at the
/// initial pose; steps that raise the cost or push a contributing Gaussian
/// out of view are rejected and the damping raised.
pub fn refine_pose(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    image: &ImageBuffer,
    config: &LkConfig,
) -> Result<(CameraPose, LkDiagnostics)> {
    config.validate()?;
    if image.dimensions() != (intrinsics.width, intrinsics.height) {
        return Err(Error::InvalidArgument(format!(
            "image is {:?} but intrinsics describe {}x{}",
            image.dimensions(),
            intrinsics.width,
            intrinsics.height
        )));
    }
    let gradients = image.gradient()?;
    let start = render(cloud, pose, intrinsics);
    let visibility = start.visibility;
    let r = pose.rotation_matrix();
    let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
    let active: Vec<bool> = cloud
        .gaussians
        .iter()
        .zip(&visibility)
        .map(|(g, &vis)| {
            let pc = r * g.position + pose.translation;
            if vis < config.visibility_threshold || pc.z <= 0.0 {
                return false;
            }
            let u = intrinsics.fx * pc.x / pc.z + intrinsics.cx;
            let v = intrinsics.fy * pc.y / pc.z + intrinsics.cy;
            u >= BORDER_MARGIN && v >= BORDER_MARGIN && u <= w - 1.0 - BORDER_MARGIN && v <= h - 1.0 - BORDER_MARGIN
        })
        .collect();

    // Active Gaussians project inside the border margin, so sampling the
    // starting render at their centres always succeeds.
    let colors: Vec<Vector3<f64>> = match config.color_target {
        ColorTarget::Base => cloud.gaussians.iter().map(|g| g.color).collect(),
        ColorTarget::Rendered => cloud
            .gaussians
            .iter()
            .zip(&active)
            .map(|(g, &a)| {
                let pc = r * g.position + pose.translation;
                let px = nalgebra::Vector2::new(
                    intrinsics.fx * pc.x / pc.z + intrinsics.cx,
                    intrinsics.fy * pc.y / pc.z + intrinsics.cy,
                );
                if a {
                    start.image.sample_bilinear(&px).unwrap_or(g.color)
                } else {
                    g.color
                }
            })
            .collect(),
    };

    let mut diag = LkDiagnostics {
        active_gaussians: active.iter().filter(|&&a| a).count(),
        ..Default::default()
    };
    if diag.active_gaussians == 0 {
        warn!("no visible Gaussians; pose left unchanged");
        diag.warning = Some(LkWarning::NoVisibleGaussians);
        return Ok((*pose, diag));
    }

    let cost_of = |residuals: &[LkResidual]| -> f64 {
        let mut missing = false;
        let mut cost = 0.0;
        for (res, &a) in residuals.iter().zip(&active) {
            if a {
                if res.weight > 0.0 {
                    cost += res.residual.norm_squared();
                } else {
                    missing = true;
                }
            }
        }
        if missing {
            f64::INFINITY
        } else {
            cost
        }
    };

    let mut current = *pose;
    let mut residuals = linearize(cloud, &current, intrinsics, image, &gradients, &active, &colors);
    let mut cost = cost_of(&residuals);
    diag.cost_trace.push(cost);
    let mut lambda = config.damping;
    let mut rejections = 0;
    for it in 0..config.max_iterations {
        diag.iterations = it + 1;
        let (hm, b) = assemble_normal_equations(&residuals)?;
        let delta = match solve_increment(&hm, &b, lambda) {
            Ok(d) => d,
            Err(Error::RankDeficient { .. }) => {
                warn!("singular LK normal equations; pose left unchanged");
                diag.warning = Some(LkWarning::RankDeficient);
                diag.iterations = it;
                break;
            }
            Err(e) => return Err(e),
        };
        let step_norm = config.step_scale * delta.norm();
        let candidate = current.apply_increment(&delta, config.step_scale);
        let cand_res = linearize(cloud, &candidate, intrinsics, image, &gradients, &active, &colors);
        let cand_cost = cost_of(&cand_res);
        if cand_cost <= cost {
            current = candidate;
            residuals = cand_res;
            cost = cand_cost;
            lambda = (lambda * 0.1).max(config.damping);
            rejections = 0;
            diag.accepted.push(true);
            diag.cost_trace.push(cost);
            if step_norm < config.convergence_tol {
                diag.converged = true;
                break;
            }
        } else {
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            rejections += 1;
            diag.accepted.push(false);
            diag.cost_trace.push(cost);
            if step_norm < config.convergence_tol || rejections >= MAX_REJECTIONS {
                diag.converged = step_norm < config.convergence_tol;
                break;
            }
        }
    }
    debug!(
        "LK3D: {} iterations, cost {:.6e} -> {:.6e}",
        diag.iterations, diag.cost_trace[0], cost
    );
    Ok((current, diag))
}

/// Refines each pose independently against its own image; the work is
/// spread over threads and the output order follows the input.
pub fn refine_all_poses(
    cloud: &GaussianCloud,
    poses: &[CameraPose],
    intrinsics: &CameraIntrinsics,
    images: &[ImageBuffer],
    config: &LkConfig,
) -> Result<Vec<(CameraPose, LkDiagnostics)>> {
    if poses.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} poses but {} images",
            poses.len(),
            images.len()
        )));
    }
    poses
        .par_iter()
        .zip(images.par_iter())
        .map(|(pose, image)| refine_pose(cloud, pose, intrinsics, image, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_angle_between, EulerAngles};
    use crate::render::GaussianPrimitive;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix6, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 31.5, 31.5, 64, 64).unwrap()
    }

    fn residual(rows: Matrix3x6<f64>, l: Vector3<f64>) -> LkResidual {
        LkResidual {
            gaussian_index: 0,
            residual: l,
            steepest_rows: rows,
            weight: 1.0,
        }
    }

    #[test]
    fn single_row_normal_equations() {
        let mut rows = Matrix3x6::zeros();
        rows[(0, 0)] = 1.0;
        let (h, b) = assemble_normal_equations(&[residual(rows, Vector3::new(1.0, 0.0, 0.0))]).unwrap();
        let mut e = Matrix6::zeros();
        e[(0, 0)] = 1.0;
        assert_eq!(h, e);
        assert_eq!(b, Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn normal_equations_are_symmetric_psd_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let res: Vec<LkResidual> = (0..30)
            .map(|_| {
                residual(
                    Matrix3x6::from_fn(|_, _| rng.random_range(-3.0..3.0)),
                    Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let (h, b) = assemble_normal_equations(&res).unwrap();
        assert_eq!(h, h.transpose());
        for _ in 0..100 {
            let x = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            assert!(x.dot(&(h * x)) >= -1e-10);
        }
        let doubled: Vec<LkResidual> = res.iter().chain(res.iter()).copied().collect();
        let (h2, b2) = assemble_normal_equations(&doubled).unwrap();
        assert_relative_eq!(h2, h * 2.0, max_relative = 1e-12);
        assert_relative_eq!(b2, b * 2.0, max_relative = 1e-12);
    }

    #[test]
    fn all_excluded_has_no_constraints() {
        let r = LkResidual::excluded(3);
        assert!(matches!(assemble_normal_equations(&[r]), Err(Error::NoConstraints)));
    }

    #[test]
    fn identity_system() {
        let x = solve_increment(&Matrix6::identity(), &Vector6::repeat(1.0), 0.0).unwrap();
        assert_relative_eq!(x, Vector6::repeat(1.0), epsilon = 1e-15);
    }

    #[test]
    fn rank_one_system() {
        let v = Vector6::new(1.0, 2.0, -1.0, 0.5, 3.0, -2.0);
        let h = v * v.transpose();
        let b = v * 2.0;
        assert!(matches!(solve_increment(&h, &b, 0.0), Err(Error::RankDeficient { .. })));
        let x = solve_increment(&h, &b, 1e-3).unwrap();
        assert!(x.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn random_psd_system_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let h = a * a.transpose() + Matrix6::identity() * 0.1;
            let b = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let x = solve_increment(&h, &b, 0.0).unwrap();
            assert!((h * x - b).norm() < 1e-8);
        }
    }

    /// Smooth, strongly textured color field.
    fn texture(p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            0.5 + 0.4 * (3.1 * p.x + 1.3 * p.y).sin(),
            0.5 + 0.4 * (2.3 * p.y - 1.7 * p.z + 0.4).sin(),
            0.5 + 0.4 * (2.9 * p.z + 1.1 * p.x + 1.0).cos(),
        )
    }

    fn textured_wall(rng: &mut ChaCha8Rng) -> GaussianCloud {
        let mut gs = Vec::new();
        for i in 0..24 {
            for j in 0..24 {
                let p = Vector3::new(
                    -1.2 + 0.1 * i as f64 + rng.random_range(-0.02..0.02),
                    -1.2 + 0.1 * j as f64 + rng.random_range(-0.02..0.02),
                    3.0 + 0.3 * (1.7 * i as f64 * 0.1).sin(),
                );
                gs.push(GaussianPrimitive::isotropic(p, 0.07, 0.95, texture(&p)));
            }
        }
        GaussianCloud::new(gs)
    }

    #[test]
    fn steepest_rows_match_finite_differences_on_affine_image() {
        // Bilinear sampling and central differences are exact for an
        // affine image, so d_g must agree with finite differences.
        let img = ImageBuffer::from_fn(64, 64, |u, v| {
            let (u, v) = (u as f64, v as f64);
            [0.01 * u + 0.003 * v, -0.004 * u + 0.02 * v, 0.5 + 0.002 * (u - v)]
        });
        let grads = img.gradient().unwrap();
        let k = k64();
        let pose = CameraPose::new(EulerAngles::new(0.05, -0.03, 0.02), Vector3::new(0.1, -0.05, 0.2));
        let cloud = GaussianCloud::new(vec![
            GaussianPrimitive::isotropic(Vector3::new(0.2, -0.1, 3.0), 0.1, 0.9, Vector3::zeros()),
            GaussianPrimitive::isotropic(Vector3::new(-0.3, 0.25, 2.5), 0.1, 0.9, Vector3::zeros()),
        ]);
        let res = build_residuals(&cloud, &pose, &k, &img, &grads, &[1.0, 1.0], &LkConfig::default());
        let sample = |p: &CameraPose, x: &Vector3<f64>| img.sample_bilinear(&project(x, p, &k).unwrap().pixel).unwrap();
        for r in &res {
            assert_eq!(r.weight, 1.0);
            let x = cloud.gaussians[r.gaussian_index].position;
            for c in 0..6 {
                let h = 1e-6;
                let mut dp = Vector6::zeros();
                dp[c] = h;
                let fd = (sample(&pose.apply_increment(&dp, 1.0), &x) - sample(&pose.apply_increment(&dp, -1.0), &x))
                    / (2.0 * h);
                for ch in 0..3 {
                    let an = r.steepest_rows[(ch, c)];
                    assert!(
                        (an - fd[ch]).abs() <= 1e-3 * an.abs().max(fd[ch].abs()) + 1e-9,
                        "{ch} {c}: {an} vs {}",
                        fd[ch]
                    );
                }
            }
        }
    }

    #[test]
    fn matched_colors_give_zero_residual_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cloud = textured_wall(&mut rng);
        let k = k64();
        let pose = CameraPose::new(EulerAngles::new(0.02, -0.01, 0.03), Vector3::new(0.05, 0.0, 0.1));
        let img = render(&cloud, &pose, &k).image;
        // Recolor every Gaussian with the image value under its centre.
        for g in &mut cloud.gaussians {
            if let Ok(p) = project(&g.position, &pose, &k) {
                if let Some(c) = img.sample_bilinear(&p.pixel) {
                    g.color = c;
                }
            }
        }
        let grads = img.gradient().unwrap();
        let vis = render(&cloud, &pose, &k).visibility;
        let res = build_residuals(&cloud, &pose, &k, &img, &grads, &vis, &LkConfig::default());
        assert!(res
            .iter()
            .filter(|r| r.weight > 0.0)
            .all(|r| r.residual == Vector3::zeros()));
        let (refined, diag) = refine_pose(&cloud, &pose, &k, &img, &LkConfig::default()).unwrap();
        assert!((refined.to_vector() - pose.to_vector()).norm() < 1e-6);
        assert!(diag.converged);
    }

    #[test]
    fn self_rendered_residuals_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = textured_wall(&mut rng);
        let k = k64();
        let pose = CameraPose::identity();
        let out = render(&cloud, &pose, &k);
        let grads = out.image.gradient().unwrap();
        let res = build_residuals(
            &cloud,
            &pose,
            &k,
            &out.image,
            &grads,
            &out.visibility,
            &LkConfig::default(),
        );
        let used: Vec<_> = res.iter().filter(|r| r.weight > 0.0).collect();
        assert!(used.len() > 100);
        let mean = used.iter().map(|r| r.residual.norm()).sum::<f64>() / used.len() as f64;
        assert!(mean < 0.05, "mean residual {mean}");
    }

    #[test]
    fn flat_image_leaves_pose_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = textured_wall(&mut rng);
        let k = k64();
        let img = ImageBuffer::filled(64, 64, [0.5; 3]);
        let grads = img.gradient().unwrap();
        let vis = vec![1.0; cloud.len()];
        let res = build_residuals(
            &cloud,
            &CameraPose::identity(),
            &k,
            &img,
            &grads,
            &vis,
            &LkConfig::default(),
        );
        assert!(res.iter().all(|r| r.steepest_rows == Matrix3x6::zeros()));
        let pose = CameraPose::new(EulerAngles::new(0.01, 0.0, 0.0), Vector3::zeros());
        let (out, diag) = refine_pose(&cloud, &pose, &k, &img, &LkConfig::default()).unwrap();
        assert_eq!(out, pose);
        assert_eq!(diag.warning, Some(LkWarning::RankDeficient));
    }

    #[test]
    fn nothing_visible_warns() {
        let cloud = GaussianCloud::new(vec![GaussianPrimitive::isotropic(
            Vector3::new(0.0, 0.0, -2.0),
            0.1,
            0.9,
            Vector3::zeros(),
        )]);
        let img = ImageBuffer::filled(64, 64, [0.2; 3]);
        let (out, diag) = refine_pose(&cloud, &CameraPose::identity(), &k64(), &img, &LkConfig::default()).unwrap();
        assert_eq!(out, CameraPose::identity());
        assert_eq!(diag.warning, Some(LkWarning::NoVisibleGaussians));
    }

    fn perturbed(pose: &CameraPose, rng: &mut ChaCha8Rng, rot_deg: f64, trans: f64) -> CameraPose {
        let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let d = rot_deg.to_radians();
        let dir = Vector3::new(sign(), sign(), sign()).normalize();
        let delta = Vector6::new(
            sign() * d,
            sign() * d,
            sign() * d,
            dir.x * trans,
            dir.y * trans,
            dir.z * trans,
        );
        pose.apply_increment(&delta, 1.0)
    }

    #[test]
    fn recovers_small_perturbation_with_monotone_cost() {
        use crate::synthetic::{generate_synthetic_scene, SyntheticSceneSpec};
        let scene = generate_synthetic_scene(&SyntheticSceneSpec {
            gaussian_count: 300,
            view_count: 3,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = scene.poses[1];
        let img = scene.surface.render(&truth, &scene.intrinsics);
        let extent = scene.cloud.extent();
        let start = perturbed(&truth, &mut rng, 1.0, 0.01 * extent);
        let cfg = LkConfig {
            max_iterations: 100,
            ..Default::default()
        };
        let (out, diag) = refine_pose(&scene.cloud, &start, &scene.intrinsics, &img, &cfg).unwrap();
        let rot_err = rotation_angle_between(&out.rotation_matrix(), &truth.rotation_matrix()).to_degrees();
        let trans_err = (out.translation - truth.translation).norm() / extent;
        assert!(rot_err < 0.1, "rotation error {rot_err} deg");
        assert!(trans_err < 1e-3, "translation error {trans_err}");
        assert!(diag.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        let rr = out.rotation_matrix();
        assert_relative_eq!(rr.transpose() * rr, nalgebra::Matrix3::identity(), epsilon = 1e-9);
    }

    #[test]
    fn brightness_offset_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = textured_wall(&mut rng);
        let k = k64();
        let img = render(&cloud, &CameraPose::identity(), &k).image;
        let start = perturbed(&CameraPose::identity(), &mut rng, 0.5, 0.01);
        let mut bright = cloud.clone();
        bright.gaussians.iter_mut().for_each(|g| g.color.add_scalar_mut(0.25));
        let img_bright = img.map(|x| x + 0.25);
        let (a, _) = refine_pose(&cloud, &start, &k, &img, &LkConfig::default()).unwrap();
        let (b, _) = refine_pose(&bright, &start, &k, &img_bright, &LkConfig::default()).unwrap();
        assert!((a.to_vector() - b.to_vector()).norm() < 1e-9);
    }

    #[test]
    fn refine_all_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cloud = textured_wall(&mut rng);
        let k = k64();
        let truths: Vec<CameraPose> = (0..4)
            .map(|i| {
                CameraPose::new(
                    EulerAngles::new(0.0, 0.03 * i as f64, 0.0),
                    Vector3::new(0.05 * i as f64, 0.0, 0.0),
                )
            })
            .collect();
        let images: Vec<ImageBuffer> = truths.iter().map(|p| render(&cloud, p, &k).image).collect();
        let starts: Vec<CameraPose> = truths.iter().map(|p| perturbed(p, &mut rng, 0.5, 0.01)).collect();
        let fwd = refine_all_poses(&cloud, &starts, &k, &images, &LkConfig::default()).unwrap();
        let rs: Vec<CameraPose> = starts.iter().rev().copied().collect();
        let ri: Vec<ImageBuffer> = images.iter().rev().cloned().collect();
        let mut back = refine_all_poses(&cloud, &rs, &k, &ri, &LkConfig::default()).unwrap();
        back.reverse();
        for (a, b) in fwd.iter().zip(&back) {
            assert_eq!(a.0, b.0);
        }
        assert!(refine_all_poses(&cloud, &starts[..2], &k, &images, &LkConfig::default()).is_err());
    }

    #[test]
    fn sample_wrapper_matches_image() {
        let img = ImageBuffer::from_fn(4, 4, |u, v| [u as f64, v as f64, 0.0]);
        assert_eq!(
            sample_bilinear(&img, &Vector2::new(1.5, 2.0)).unwrap(),
            Vector3::new(1.5, 2.0, 0.0)
        );
        assert!(image_gradient(&ImageBuffer::new(2, 2)).is_err());
    }
}
