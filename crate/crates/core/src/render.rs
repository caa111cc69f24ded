//! CPU splat rasterizer with an analytic backward pass.
//!
//! Each Gaussian is projected with the local affine (EWA) approximation,
//! dilated by 0.3 px^2, truncated at a Mahalanobis radius of 3 and
//! alpha-composited front to back over a black background. Rasterization
//! walks 16x16 pixel tiles; within a tile the splats are visited in global
//! depth order (ties broken by input index).

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::ImageBuffer;

/// Low-pass dilation added to every projected covariance, in px^2.
pub const COV2D_DILATION: f64 = 0.3;
/// Squared Mahalanobis radius beyond which a splat contributes nothing.
pub const TRUNCATION_SQ: f64 = 9.0;
/// Gaussians closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
const TILE: usize = 16;
const MIN_TRANSMITTANCE: f64 = 1e-4;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    /// Per-axis log standard deviation.
    pub log_scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// View-independent RGB in `[0, 1]`.
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            position,
            log_scale: Vector3::repeat(sigma.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scale.max().exp()
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalized(&self.rotation))
    }

    /// World-space covariance `R S^2 R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = normalized(&self.rotation);
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.log_scale.iter())
            .chain(self.color.iter())
            .all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }
}

fn normalized(q: &[f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Derivatives of [`quat_to_matrix`] with respect to `(w, x, y, z)`.
fn quat_matrix_derivatives(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(
            0.0,
            t * y,
            t * z,
            t * y,
            -2.0 * t * x,
            -t * w,
            t * z,
            t * w,
            -2.0 * t * x,
        ),
        Matrix3::new(
            -2.0 * t * y,
            t * x,
            t * w,
            t * x,
            0.0,
            t * z,
            -t * w,
            t * z,
            -2.0 * t * y,
        ),
        Matrix3::new(
            -2.0 * t * z,
            -t * w,
            t * x,
            t * w,
            -2.0 * t * z,
            t * y,
            t * x,
            t * y,
            0.0,
        ),
    ]
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<GaussianPrimitive>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<GaussianPrimitive>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(GaussianPrimitive::is_finite)
    }

    /// Radius of the bounding sphere of the Gaussian centres about their mean.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let c = self.centroid();
        self.gaussians
            .iter()
            .map(|g| (g.position - c).norm())
            .fold(0.0, f64::max)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.gaussians.len().max(1) as f64;
        self.gaussians.iter().map(|g| g.position).sum::<Vector3<f64>>() / n
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// EWA projection. Returns `None` when the Gaussian is behind the near
/// plane (culled).
pub fn project_gaussian(g: &GaussianPrimitive, pose: &CameraPose, k: &CameraIntrinsics) -> Option<ProjectedGaussian> {
    let w = pose.rotation_matrix();
    let t = w * g.position + pose.translation;
    if t.z <= NEAR_PLANE {
        return None;
    }
    let j = ewa_jacobian(&t, k);
    let m = j * w;
    let cov = m * g.covariance() * m.transpose() + Matrix2::identity() * COV2D_DILATION;
    Some(ProjectedGaussian {
        mean: Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy),
        cov,
        depth: t.z,
    })
}

fn ewa_jacobian(t: &Vector3<f64>, k: &CameraIntrinsics) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * t.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * t.y * iz * iz,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    /// Accumulated opacity `1 - T` per pixel, row-major.
    pub per_pixel_alpha: Vec<f64>,
    /// Largest blend weight `alpha_i G_i T_i` each Gaussian reached.
    pub visibility: Vec<f64>,
    /// Radius in pixels of each Gaussian's 3-sigma footprint (0 if culled).
    pub radii: Vec<f64>,
    /// Number of (pixel, Gaussian) pairs that were blended.
    pub contributions: usize,
}

struct Splat {
    index: usize,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
}

struct Frame {
    width: usize,
    height: usize,
    splats: Vec<Splat>,
    tiles_x: usize,
    tiles: Vec<Vec<u32>>,
    radii: Vec<f64>,
}

impl Frame {
    fn build(cloud: &GaussianCloud, pose: &CameraPose, k: &CameraIntrinsics) -> Frame {
        let (width, height) = (k.width, k.height);
        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut radii = vec![0.0; cloud.len()];
        let mut splats = Vec::new();
        let mut boxes = Vec::new();
        for (index, g) in cloud.gaussians.iter().enumerate() {
            let Some(p) = project_gaussian(g, pose, k) else {
                continue;
            };
            let det = p.cov.determinant();
            if !(det > 0.0) || !p.mean.iter().all(|v| v.is_finite()) {
                continue;
            }
            let half_tr = 0.5 * (p.cov[(0, 0)] + p.cov[(1, 1)]);
            let lambda_max = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
            let radius = TRUNCATION_SQ.sqrt() * lambda_max.sqrt();
            let x0 = (p.mean.x - radius).ceil().max(0.0);
            let x1 = (p.mean.x + radius).floor().min((width - 1) as f64);
            let y0 = (p.mean.y - radius).ceil().max(0.0);
            let y1 = (p.mean.y + radius).floor().min((height - 1) as f64);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            radii[index] = radius;
            let conic = Matrix2::new(p.cov[(1, 1)], -p.cov[(0, 1)], -p.cov[(1, 0)], p.cov[(0, 0)]) / det;
            splats.push(Splat {
                index,
                mean: p.mean,
                conic,
                depth: p.depth,
                opacity: g.opacity(),
                color: g.color,
            });
            boxes.push([x0 as usize, x1 as usize, y0 as usize, y1 as usize]);
        }
        let mut order: Vec<usize> = (0..splats.len()).collect();
        order.sort_by(|&a, &b| {
            splats[a]
                .depth
                .total_cmp(&splats[b].depth)
                .then(splats[a].index.cmp(&splats[b].index))
        });
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for &s in &order {
            let [x0, x1, y0, y1] = boxes[s];
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[ty * tiles_x + tx].push(s as u32);
                }
            }
        }
        Frame {
            width,
            height,
            splats,
            tiles_x,
            tiles,
            radii,
        }
    }

    fn tile_of(&self, u: usize, v: usize) -> &[u32] {
        &self.tiles[(v / TILE) * self.tiles_x + u / TILE]
    }

    /// Calls `f(splat, a = alpha * G, G, d = p - mean, T_before)` for each
    /// blended splat at pixel `(u, v)` in compositing order; returns the final
    /// transmittance.
    #[inline]
    fn walk_pixel(&self, u: usize, v: usize, mut f: impl FnMut(usize, f64, f64, Vector2<f64>, f64)) -> f64 {
        let p = Vector2::new(u as f64, v as f64);
        let mut t = 1.0;
        for &s in self.tile_of(u, v) {
            let sp = &self.splats[s as usize];
            let d = p - sp.mean;
            let q = d.dot(&(sp.conic * d));
            if !(q <= TRUNCATION_SQ) {
                continue;
            }
            let g = (-0.5 * q).exp();
            let a = sp.opacity * g;
            f(s as usize, a, g, d, t);
            t *= 1.0 - a;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }
}

/// Forward render of `cloud` seen from `pose`. An empty visible set gives a
/// black image.
pub fn render(cloud: &GaussianCloud, pose: &CameraPose, k: &CameraIntrinsics) -> RenderOutput {
    let frame = Frame::build(cloud, pose, k);
    let (w, h) = (frame.width, frame.height);
    let mut image = ImageBuffer::new(w, h);
    let mut alpha = vec![0.0; w * h];
    let mut visibility = vec![0.0; cloud.len()];
    let mut contributions = 0;
    for v in 0..h {
        for u in 0..w {
            let mut c = Vector3::zeros();
            let t = frame.walk_pixel(u, v, |s, a, _, _, t| {
                let sp = &frame.splats[s];
                let weight = a * t;
                c += sp.color * weight;
                let vis = &mut visibility[sp.index];
                if weight > *vis {
                    *vis = weight;
                }
                contributions += 1;
            });
            image.set(u, v, [c.x, c.y, c.z]);
            alpha[v * w + u] = 1.0 - t;
        }
    }
    RenderOutput {
        image,
        per_pixel_alpha: alpha,
        visibility,
        radii: frame.radii,
        contributions,
    }
}

/// Gradient of a scalar loss with respect to every Gaussian parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradient {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Gradient with respect to the projected 2D mean, used for densification.
    pub mean2d: Vec<Vector2<f64>>,
}

impl CloudGradient {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            mean2d: vec![Vector2::zeros(); n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.log_scale.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.rotation.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.opacity_logit.iter().all(|&x| x == 0.0)
            && self.color.iter().all(|v| v.iter().all(|&x| x == 0.0))
    }
}

/// Reverse-mode pass through compositing, EWA projection and perspective
/// projection. `d_image` is the gradient of the loss with respect to the
/// rendered image.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    d_image: &ImageBuffer,
) -> Result<CloudGradient> {
    if d_image.dimensions() != (k.width, k.height) {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient is {:?} but the camera renders {}x{}",
            d_image.dimensions(),
            k.width,
            k.height
        )));
    }
    let frame = Frame::build(cloud, pose, k);
    let n = frame.splats.len();
    let mut d_mean = vec![Vector2::<f64>::zeros(); n];
    let mut d_conic = vec![Matrix2::<f64>::zeros(); n];
    let mut d_opacity = vec![0.0; n];
    let mut d_color = vec![Vector3::<f64>::zeros(); n];

    struct Hit {
        splat: usize,
        a: f64,
        g: f64,
        d: Vector2<f64>,
        t: f64,
    }
    let mut hits: Vec<Hit> = Vec::new();
    for v in 0..frame.height {
        for u in 0..frame.width {
            let dc = Vector3::from(d_image.get(u, v));
            if dc.iter().all(|&x| x == 0.0) {
                continue;
            }
            hits.clear();
            frame.walk_pixel(u, v, |splat, a, g, d, t| hits.push(Hit { splat, a, g, d, t }));
            // Colour composited behind the current splat.
            let mut behind = Vector3::zeros();
            for hit in hits.iter().rev() {
                let sp = &frame.splats[hit.splat];
                d_color[hit.splat] += dc * (hit.a * hit.t);
                let d_a = hit.t * dc.dot(&(sp.color - behind));
                behind = sp.color * hit.a + behind * (1.0 - hit.a);
                d_opacity[hit.splat] += d_a * hit.g;
                let d_g = d_a * sp.opacity;
                let d_q = -0.5 * hit.g * d_g;
                d_mean[hit.splat] += -2.0 * d_q * (sp.conic * hit.d);
                d_conic[hit.splat] += d_q * (hit.d * hit.d.transpose());
            }
        }
    }

    let mut grad = CloudGradient::zeros(cloud.len());
    let w = pose.rotation_matrix();
    for (s, sp) in frame.splats.iter().enumerate() {
        let i = sp.index;
        let g = &cloud.gaussians[i];
        grad.color[i] = d_color[s];
        grad.mean2d[i] = d_mean[s];
        let alpha = sp.opacity;
        grad.opacity_logit[i] = d_opacity[s] * alpha * (1.0 - alpha);

        // conic = cov^-1
        let d_cov = -(sp.conic * d_conic[s] * sp.conic);
        let d_cov = 0.5 * (d_cov + d_cov.transpose());

        let t = w * g.position + pose.translation;
        let j = ewa_jacobian(&t, k);
        let m = j * w;
        let rq_raw = normalized(&g.rotation);
        let rq = quat_to_matrix(&rq_raw);
        let scale = g.scale();
        let m2 = rq * Matrix3::from_diagonal(&scale);
        let sigma = m2 * m2.transpose();

        let d_sigma = m.transpose() * d_cov * m;
        let d_m = 2.0 * d_cov * m * sigma;
        let d_j = d_m * w.transpose();

        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut d_t = j.transpose() * d_mean[s];
        d_t.x += d_j[(0, 2)] * (-k.fx * iz2);
        d_t.y += d_j[(1, 2)] * (-k.fy * iz2);
        d_t.z += d_j[(0, 0)] * (-k.fx * iz2)
            + d_j[(0, 2)] * (2.0 * k.fx * t.x * iz3)
            + d_j[(1, 1)] * (-k.fy * iz2)
            + d_j[(1, 2)] * (2.0 * k.fy * t.y * iz3);
        grad.position[i] = w.transpose() * d_t;

        let d_m2 = 2.0 * d_sigma * m2;
        let mut d_rq = Matrix3::zeros();
        for c in 0..3 {
            let col = d_m2.column(c);
            grad.log_scale[i][c] = col.dot(&rq.column(c)) * scale[c];
            d_rq.set_column(c, &(col * scale[c]));
        }
        let dq_hat: [f64; 4] = {
            let ders = quat_matrix_derivatives(&rq_raw);
            [0, 1, 2, 3].map(|c| d_rq.component_mul(&ders[c]).sum())
        };
        // Through q_hat = q / |q|.
        let qn = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = (0..4).map(|c| dq_hat[c] * rq_raw[c]).sum();
        grad.rotation[i] = [0, 1, 2, 3].map(|c| (dq_hat[c] - rq_raw[c] * dot) / qn);
    }
    Ok(grad)
}

/// Per-Gaussian statistics accumulated between densification passes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientStats {
    /// Sum of screen-space mean-gradient norms.
    pub mean2d_norm_sum: Vec<f64>,
    /// Sum of world-space position gradients.
    pub position_sum: Vec<Vector3<f64>>,
    pub counts: Vec<u32>,
    pub max_radius: Vec<f64>,
}

impl GradientStats {
    pub fn new(n: usize) -> Self {
        Self {
            mean2d_norm_sum: vec![0.0; n],
            position_sum: vec![Vector3::zeros(); n],
            counts: vec![0; n],
            max_radius: vec![0.0; n],
        }
    }

    /// Adds one view's gradients for the Gaussians that were rendered.
    pub fn accumulate(&mut self, grad: &CloudGradient, render: &RenderOutput) {
        for i in 0..self.counts.len() {
            if render.radii[i] > 0.0 && render.visibility[i] > 0.0 {
                self.mean2d_norm_sum[i] += grad.mean2d[i].norm();
                self.position_sum[i] += grad.position[i];
                self.counts[i] += 1;
                self.max_radius[i] = self.max_radius[i].max(render.radii[i]);
            }
        }
    }

    pub fn average_mean2d(&self, i: usize) -> f64 {
        if self.counts[i] == 0 {
            0.0
        } else {
            self.mean2d_norm_sum[i] / self.counts[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyThresholds {
    /// Average screen-space gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians with max scale above this fraction of the extent are split,
    /// smaller ones cloned.
    pub percent_dense: f64,
    pub scene_extent: f64,
    pub min_opacity: f64,
    /// Screen-space radius (px) above which a Gaussian is pruned.
    pub max_screen_radius: Option<f64>,
    /// World-space max scale, as a fraction of the extent, above which a
    /// Gaussian is pruned.
    pub max_world_fraction: f64,
    pub split_children: usize,
}

impl DensifyThresholds {
    pub fn for_extent(scene_extent: f64) -> Self {
        Self {
            grad_threshold: 0.0002,
            percent_dense: 0.01,
            scene_extent,
            min_opacity: 0.005,
            max_screen_radius: None,
            max_world_fraction: 0.1,
            split_children: 2,
        }
    }
}

/// Result of [`densify_and_prune`]: the new cloud and, for each of its
/// Gaussians, the index of the original it continues (`None` for new ones).
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyResult {
    pub cloud: GaussianCloud,
    pub origin: Vec<Option<usize>>,
}

/// Adaptive density control: clone small high-gradient Gaussians, split
/// large ones into children with scale divided by 1.6, and prune
/// transparent or oversized ones.
pub fn densify_and_prune<R: Rng>(
    cloud: &GaussianCloud,
    stats: &GradientStats,
    thresholds: &DensifyThresholds,
    rng: &mut R,
) -> DensifyResult {
    let mut kept = Vec::new();
    let mut origin = Vec::new();
    let mut clones = Vec::new();
    let mut children = Vec::new();
    let dense_limit = thresholds.percent_dense * thresholds.scene_extent;
    let scale_shrink = (0.8 * thresholds.split_children as f64).ln();
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let hot = stats.counts.get(i).copied().unwrap_or(0) > 0 && stats.average_mean2d(i) >= thresholds.grad_threshold;
        let big = g.max_scale() > dense_limit;
        let mut keep = true;
        if hot && !big {
            let mut c = *g;
            let dir = stats.position_sum[i];
            if dir.norm() > 0.0 {
                c.position -= dir.normalize() * g.max_scale();
            }
            clones.push(c);
        } else if hot && big {
            keep = false;
            let r = g.rotation_matrix();
            let s = g.scale();
            for _ in 0..thresholds.split_children {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut c = *g;
                c.position = g.position + r * s.component_mul(&z);
                c.log_scale = g.log_scale.add_scalar(-scale_shrink);
                children.push(c);
            }
        }
        let too_faint = g.opacity() < thresholds.min_opacity;
        let too_big_screen = thresholds
            .max_screen_radius
            .is_some_and(|m| stats.max_radius.get(i).copied().unwrap_or(0.0) > m);
        let too_big_world = g.max_scale() > thresholds.max_world_fraction * thresholds.scene_extent;
        if keep && !(too_faint || too_big_screen || too_big_world) {
            kept.push(*g);
            origin.push(Some(i));
        }
    }
    let prune_new = |g: &GaussianPrimitive| g.opacity() >= thresholds.min_opacity;
    for g in clones.into_iter().chain(children).filter(prune_new) {
        kept.push(g);
        origin.push(None);
    }
    DensifyResult {
        cloud: GaussianCloud::new(kept),
        origin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EulerAngles;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn k(w: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, (w / 2) as f64, (w / 2) as f64, w, w).unwrap()
    }

    #[test]
    fn on_axis_isotropic_projection() {
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.1, 0.5, Vector3::zeros());
        let p = project_gaussian(&g, &CameraPose::identity(), &k(101)).unwrap();
        assert_relative_eq!(p.cov, Matrix2::new(100.3, 0.0, 0.0, 100.3), epsilon = 1e-9);
        assert_relative_eq!(p.mean, Vector2::new(50.0, 50.0));
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.5, Vector3::zeros());
        assert!(project_gaussian(&g, &CameraPose::identity(), &k(64)).is_none());
    }

    #[test]
    fn rotation_about_view_axis_swaps_eigenvalues() {
        let mut g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, Vector3::zeros());
        g.log_scale = Vector3::new(0.2f64.ln(), 0.05f64.ln(), 0.1f64.ln());
        let a = project_gaussian(&g, &CameraPose::identity(), &k(101)).unwrap();
        let half = std::f64::consts::FRAC_PI_4;
        g.rotation = [half.cos(), 0.0, 0.0, half.sin()];
        let b = project_gaussian(&g, &CameraPose::identity(), &k(101)).unwrap();
        assert_relative_eq!(a.cov[(0, 0)], b.cov[(1, 1)], epsilon = 1e-9);
        assert_relative_eq!(a.cov[(1, 1)], b.cov[(0, 0)], epsilon = 1e-9);
        assert!(a.cov[(0, 0)] > a.cov[(1, 1)]);
    }

    #[test]
    fn saturated_single_splat() {
        let mut g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 1.0), 1.0, 0.5, Vector3::new(1.0, 0.0, 0.0));
        g.opacity_logit = 30.0;
        let out = render(&GaussianCloud::new(vec![g]), &CameraPose::identity(), &k(32));
        let c = out.image.get(16, 16);
        assert!((c[0] - 1.0).abs() < 1e-3 && c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
    }

    #[test]
    fn two_layer_compositing() {
        // Both splats centred on pixel (16, 16) where G = 1, so a = opacity = 0.5.
        let near = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.05, 0.5, Vector3::new(1.0, 0.0, 0.0));
        let far = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, Vector3::new(0.0, 1.0, 0.0));
        // Input order should not matter.
        let out = render(&GaussianCloud::new(vec![far, near]), &CameraPose::identity(), &k(32));
        let c = out.image.get(16, 16);
        assert_relative_eq!(c[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(c[1], 0.25, epsilon = 1e-12);
        assert_relative_eq!(out.per_pixel_alpha[16 * 32 + 16], 0.75, epsilon = 1e-12);
        assert_relative_eq!(out.visibility[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_scene_is_black() {
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -3.0), 0.1, 0.9, Vector3::new(1.0, 1.0, 1.0));
        for cloud in [GaussianCloud::default(), GaussianCloud::new(vec![g])] {
            let out = render(&cloud, &CameraPose::identity(), &k(16));
            assert!(out.image.data().iter().all(|&x| x == 0.0));
            assert!(out.per_pixel_alpha.iter().all(|&x| x == 0.0));
        }
    }

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> GaussianCloud {
        let gs = (0..n)
            .map(|_| {
                let mut q = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let qn = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                q.iter_mut().for_each(|v| *v /= qn);
                GaussianPrimitive {
                    position: Vector3::new(
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.4..0.4),
                        rng.random_range(1.5..2.5),
                    ),
                    log_scale: Vector3::from_fn(|_, _| rng.random_range(0.03f64..0.12).ln()),
                    rotation: q,
                    opacity_logit: rng.random_range(-1.0..2.0),
                    color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                }
            })
            .collect();
        GaussianCloud::new(gs)
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(15, &mut rng);
        let pose = CameraPose::new(EulerAngles::new(0.05, -0.02, 0.1), Vector3::new(0.02, 0.0, 0.1));
        let a = render(&cloud, &pose, &k(32));
        let mut rev = cloud.clone();
        rev.gaussians.reverse();
        let b = render(&rev, &pose, &k(32));
        assert_eq!(a.image, b.image);
        assert!(a.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(8, &mut rng);
        let g = render_backward(&cloud, &CameraPose::identity(), &k(32), &ImageBuffer::new(32, 32)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn backward_rejects_wrong_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(2, &mut rng);
        assert!(render_backward(&cloud, &CameraPose::identity(), &k(32), &ImageBuffer::new(31, 32)).is_err());
    }

    #[test]
    fn color_gradient_of_l1_loss_matches_finite_differences() {
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.15, 0.8, Vector3::new(0.3, 0.6, 0.2));
        let cloud = GaussianCloud::new(vec![g]);
        let kk = k(32);
        let shifted = GaussianCloud::new(vec![GaussianPrimitive {
            position: Vector3::new(0.05, 0.0, 2.0),
            color: Vector3::new(0.7, 0.1, 0.5),
            ..g
        }]);
        let target = render(&shifted, &CameraPose::identity(), &kk).image;
        let loss = |c: &GaussianCloud| -> f64 {
            let img = render(c, &CameraPose::identity(), &kk).image;
            img.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        };
        let img = render(&cloud, &CameraPose::identity(), &kk).image;
        let d = ImageBuffer::from_raw(
            32,
            32,
            img.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).signum())
                .collect(),
        )
        .unwrap();
        let grad = render_backward(&cloud, &CameraPose::identity(), &kk, &d).unwrap();
        for c in 0..3 {
            let h = 1e-6;
            let mut p = cloud.clone();
            p.gaussians[0].color[c] += h;
            let mut m = cloud.clone();
            m.gaussians[0].color[c] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = grad.color[0][c];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()),
                "channel {c}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn densify_no_trigger_keeps_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = GaussianCloud::new(
            (0..4)
                .map(|i| {
                    GaussianPrimitive::isotropic(Vector3::new(i as f64 * 0.1, 0.0, 2.0), 0.01, 0.5, Vector3::zeros())
                })
                .collect(),
        );
        let stats = GradientStats::new(4);
        let out = densify_and_prune(&cloud, &stats, &DensifyThresholds::for_extent(1.0), &mut rng);
        assert_eq!(out.cloud, cloud);
        assert_eq!(out.origin, vec![Some(0), Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn densify_prunes_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = GaussianCloud::new(vec![
            GaussianPrimitive::isotropic(Vector3::zeros(), 0.01, 0.5, Vector3::zeros()),
            GaussianPrimitive::isotropic(Vector3::zeros(), 0.01, 0.001, Vector3::zeros()),
        ]);
        let out = densify_and_prune(
            &cloud,
            &GradientStats::new(2),
            &DensifyThresholds::for_extent(1.0),
            &mut rng,
        );
        assert_eq!(out.cloud.len(), 1);
        assert_eq!(out.origin, vec![Some(0)]);
    }

    #[test]
    fn densify_splits_large_hot_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parent = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.5, Vector3::new(0.2, 0.3, 0.4));
        let cloud = GaussianCloud::new(vec![parent]);
        let mut stats = GradientStats::new(1);
        stats.mean2d_norm_sum[0] = 0.01;
        stats.counts[0] = 1;
        let out = densify_and_prune(&cloud, &stats, &DensifyThresholds::for_extent(1.0), &mut rng);
        assert_eq!(out.cloud.len(), 2);
        assert_eq!(out.origin, vec![None, None]);
        for c in &out.cloud.gaussians {
            assert_relative_eq!(c.max_scale(), 0.05 / 1.6, epsilon = 1e-12);
            // Children are drawn from the parent's own distribution.
            assert!((c.position - parent.position).norm() < 4.0 * 0.05 * 3f64.sqrt());
            assert_eq!(c.color, parent.color);
        }
    }

    #[test]
    fn densify_clones_small_hot_gaussian_along_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.005, 0.5, Vector3::zeros());
        let cloud = GaussianCloud::new(vec![g]);
        let mut stats = GradientStats::new(1);
        stats.mean2d_norm_sum[0] = 0.01;
        stats.counts[0] = 1;
        stats.position_sum[0] = Vector3::new(2.0, 0.0, 0.0);
        let out = densify_and_prune(&cloud, &stats, &DensifyThresholds::for_extent(1.0), &mut rng);
        assert_eq!(out.origin, vec![Some(0), None]);
        assert_relative_eq!(
            out.cloud.gaussians[1].position,
            Vector3::new(-0.005, 0.0, 2.0),
            epsilon = 1e-12
        );
    }
}
