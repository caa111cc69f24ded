//! Absolute pose from 2D-3D correspondences: Grunert's three-point
//! solution inside RANSAC, then Gauss-Newton on reprojection error.

use nalgebra::{Matrix4, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{projection_jacobian_at, CameraIntrinsics, CameraPose};
use crate::metrics::umeyama;

const RANSAC_CONFIDENCE: f64 = 0.999;
const REFINE_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct PnpEstimate {
    pub pose: CameraPose,
    pub inlier_mask: Vec<bool>,
}

impl PnpEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&m| m).count()
    }
}

/// Coefficients `[A0, A1, A2, A3, A4]` of Grunert's quartic in
/// `v = s3 / s1`, where `s_i` are the distances to the three points.
/// `a, b, c` are the lengths `|p2 p3|, |p1 p3|, |p1 p2|` and the cosines
/// are between bearings `(2,3)`, `(1,3)` and `(1,2)`.
pub fn grunert_quartic(a: f64, b: f64, c: f64, cos_alpha: f64, cos_beta: f64, cos_gamma: f64) -> [f64; 5] {
    let (a2, b2, c2) = (a * a, b * b, c * c);
    let (ca, cb, cg) = (cos_alpha, cos_beta, cos_gamma);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;
    [a0, a1, a2c, a3, a4]
}

fn eval_poly(c: &[f64], x: f64) -> (f64, f64) {
    let mut p = 0.0;
    let mut dp = 0.0;
    for &k in c.iter().rev() {
        dp = dp * x + p;
        p = p * x + k;
    }
    (p, dp)
}

/// Real roots of a polynomial of degree at most four, ascending
/// coefficients, via companion-matrix eigenvalues plus Newton polishing.
pub fn real_roots(coeffs: &[f64; 5]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = 4;
    while deg > 0 && coeffs[deg].abs() <= 1e-12 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let mut comp = Matrix4::zeros();
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let values = comp.complex_eigenvalues();
    let mut roots = Vec::new();
    for z in values.iter().take(4) {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let (p, dp) = eval_poly(&coeffs[..=deg], x);
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        roots.push(x);
    }
    // Padding rows of the companion matrix add spurious zero roots.
    roots.truncate(4);
    if deg < 4 {
        let (p0, _) = eval_poly(&coeffs[..=deg], 0.0);
        if p0.abs() > 1e-12 * scale {
            roots.retain(|r| r.abs() > 1e-12);
        }
    }
    roots
}

/// Up to four camera poses consistent with three world points and
/// their unit bearing vectors.
pub fn p3p(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<CameraPose> {
    let a = (world[1] - world[2]).norm();
    let b = (world[0] - world[2]).norm();
    let c = (world[0] - world[1]).norm();
    if a < 1e-12 || b < 1e-12 || c < 1e-12 {
        return Vec::new();
    }
    if (world[1] - world[0]).cross(&(world[2] - world[0])).norm() < 1e-10 * b * c {
        return Vec::new();
    }
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);
    let coeffs = grunert_quartic(a, b, c, cos_a, cos_b, cos_g);
    let mut poses = Vec::new();
    for v in real_roots(&coeffs) {
        if v <= 0.0 {
            continue;
        }
        let denom = 1.0 + v * v - 2.0 * v * cos_b;
        if denom <= 0.0 {
            continue;
        }
        let s1 = (b * b / denom).sqrt();
        // c^2 = s1^2 (1 + u^2 - 2 u cos_g): pick the root that also fits a.
        let q = c * c / (s1 * s1);
        let disc = cos_g * cos_g - 1.0 + q;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let best_u = [cos_g + sq, cos_g - sq]
            .into_iter()
            .filter(|&u| u > 0.0)
            .map(|u| (u, (s1 * s1 * (u * u + v * v - 2.0 * u * v * cos_a) - a * a).abs()))
            .min_by(|x, y| x.1.total_cmp(&y.1));
        let Some((u, _)) = best_u else { continue };
        let cam = [bearings[0] * s1, bearings[1] * (u * s1), bearings[2] * (v * s1)];
        if let Ok(t) = umeyama(world, &cam, false) {
            poses.push(CameraPose::from_rotation_translation(&t.rotation, t.translation));
        }
    }
    poses
}

fn reprojection_error(pose: &CameraPose, x: &Vector3<f64>, px: &Vector2<f64>, k: &CameraIntrinsics) -> f64 {
    let pc = pose.transform(x);
    if pc.z <= 0.0 {
        return f64::INFINITY;
    }
    (Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px).norm()
}

/// Gauss-Newton on squared reprojection error over `idx`.
pub fn refine_pose_gn(
    pose: &CameraPose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    idx: &[usize],
    k: &CameraIntrinsics,
    iterations: usize,
) -> CameraPose {
    let cost = |p: &CameraPose| {
        idx.iter()
            .map(|&i| reprojection_error(p, &points[i], &pixels[i], k).powi(2))
            .sum::<f64>()
    };
    let mut pose = *pose;
    let mut current = cost(&pose);
    for _ in 0..iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for &i in idx {
            let pc = pose.transform(&points[i]);
            if pc.z <= 0.0 {
                continue;
            }
            let r = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - pixels[i];
            let j = projection_jacobian_at(&points[i], &pc, &pose, k);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(chol) = h.cholesky() else { break };
        let delta = -chol.solve(&g);
        let cand = pose.apply_increment(&delta, 1.0);
        let c = cost(&cand);
        if !(c <= current) {
            break;
        }
        let done = delta.norm() < 1e-14 || current - c <= 1e-16 * current;
        pose = cand;
        current = c;
        if done {
            break;
        }
    }
    pose
}

fn all_collinear(points: &[Vector3<f64>]) -> bool {
    let n = points.len() as f64;
    let mu = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().fold(nalgebra::Matrix3::zeros(), |acc, p| {
        acc + (p - mu) * (p - mu).transpose()
    });
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0]
}

/// Robust camera pose from world points and their pixel observations.
pub fn solve_pnp_ransac(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    iterations: usize,
    threshold: f64,
    seed: u64,
) -> Result<PnpEstimate> {
    if points.len() != pixels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points vs {} pixels",
            points.len(),
            pixels.len()
        )));
    }
    let n = points.len();
    if n < 4 {
        return Err(Error::InsufficientData { needed: 4, got: n });
    }
    if iterations == 0 || !(threshold > 0.0) {
        return Err(Error::InvalidArgument(
            "RANSAC needs iterations > 0 and a positive threshold".into(),
        ));
    }
    if all_collinear(points) {
        return Err(Error::Degenerate("all 3D points are collinear".into()));
    }
    let bearings: Vec<Vector3<f64>> = pixels.iter().map(|p| k.unproject(p).normalize()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(CameraPose, usize, f64)> = None;
    let mut needed = iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let world = [points[idx[0]], points[idx[1]], points[idx[2]]];
        let rays = [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]];
        let Some(pose) = p3p(&world, &rays)
            .into_iter()
            .map(|p| (reprojection_error(&p, &points[idx[3]], &pixels[idx[3]], k), p))
            .filter(|(e, _)| e.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| p)
        else {
            continue;
        };
        let mut count = 0;
        let mut err = 0.0;
        for i in 0..n {
            let e = reprojection_error(&pose, &points[i], &pixels[i], k);
            if e < threshold {
                count += 1;
                err += e;
            }
        }
        let better = match &best {
            None => true,
            Some((_, c, e0)) => count > *c || (count == *c && err < *e0),
        };
        if better {
            let w = count as f64 / n as f64;
            let p = w.powi(4);
            needed = if p >= 1.0 {
                1
            } else {
                let m = ((1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - p).ln()).ceil();
                if m.is_finite() && m > 0.0 {
                    (m as usize).min(iterations)
                } else {
                    iterations
                }
            };
            best = Some((pose, count, err));
        }
    }
    let Some((mut pose, count, _)) = best else {
        return Err(Error::Degenerate("every minimal sample was degenerate".into()));
    };
    if count < 4 {
        return Err(Error::EstimationFailed(format!(
            "best PnP model has only {count} inliers"
        )));
    }
    let mut mask = vec![false; n];
    for _ in 0..3 {
        let idx: Vec<usize> = (0..n)
            .filter(|&i| reprojection_error(&pose, &points[i], &pixels[i], k) < threshold)
            .collect();
        if idx.len() < 4 {
            break;
        }
        pose = refine_pose_gn(&pose, points, pixels, &idx, k, REFINE_ITERATIONS);
        let next: Vec<bool> = (0..n)
            .map(|i| reprojection_error(&pose, &points[i], &pixels[i], k) < threshold)
            .collect();
        let stable = next == mask;
        mask = next;
        if stable {
            break;
        }
    }
    if mask.iter().filter(|&&m| m).count() < 4 {
        return Err(Error::EstimationFailed("PnP refinement lost its consensus set".into()));
    }
    Ok(PnpEstimate {
        pose,
        inlier_mask: mask,
    })
}
