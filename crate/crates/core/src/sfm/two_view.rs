//! Essential-matrix estimation, relative pose recovery and triangulation.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{perspective_jacobian, CameraIntrinsics, CameraPose};

pub const MIN_PARALLAX_DEG: f64 = 1.0;
const RANSAC_CONFIDENCE: f64 = 0.999;
/// Relative singular-value floor below which the epipolar system is
/// treated as having more than one null direction.
const DEGENERACY_RATIO: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    pub essential: Matrix3<f64>,
    pub inlier_mask: Vec<bool>,
}

impl EssentialEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&m| m).count()
    }
}

/// Translate to the centroid and scale so the mean distance is sqrt(2).
fn normalizing_transform(pts: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |acc, p| acc + p.xy()) / n;
    let mean_dist = pts.iter().map(|p| (p.xy() - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Nearest matrix with singular values `(s, s, 0)`.
pub fn project_to_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let s = 0.5 * (sv[0] + sv[1]);
    let mut d = svd.singular_values;
    let min_idx = d.imin();
    for i in 0..3 {
        d[i] = if i == min_idx { 0.0 } else { s };
    }
    u * Matrix3::from_diagonal(&d) * v_t
}

/// Linear eight-point fit in normalised coordinates; `None` when the
/// system has more than one null direction.
fn eight_point(xa: &[Vector3<f64>], xb: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let ta = normalizing_transform(xa);
    let tb = normalizing_transform(xb);
    let rows = xa.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (r, (pa, pb)) in xa.iter().zip(xb).enumerate() {
        let (na, nb) = (ta * pa, tb * pb);
        for i in 0..3 {
            for j in 0..3 {
                a[(r, 3 * i + j)] = nb[i] * na[j];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let (largest, smallest, second) = (sv[order[0]], order[8], sv[order[7]]);
    if largest <= 0.0 || second < DEGENERACY_RATIO * largest {
        return None;
    }
    let e_norm = Matrix3::from_fn(|i, j| v_t[(smallest, 3 * i + j)]);
    let e = tb.transpose() * e_norm * ta;
    let n = e.norm();
    (n > 0.0).then(|| project_to_essential(&(e / n)))
}

/// Pixel-space fundamental matrix `K^-T E K^-1`.
pub fn fundamental_from_essential(e: &Matrix3<f64>, k: &CameraIntrinsics) -> Matrix3<f64> {
    let k_inv = k.matrix().try_inverse().expect("intrinsics are invertible");
    k_inv.transpose() * e * k_inv
}

/// First-order geometric distance of a pixel pair to the epipolar
/// constraint `x_b^T F x_a = 0`.
pub fn sampson_distance(f: &Matrix3<f64>, pa: &Vector2<f64>, pb: &Vector2<f64>) -> f64 {
    let (a, b) = (pa.push(1.0), pb.push(1.0));
    let fa = f * a;
    let fb = f.transpose() * b;
    let num = b.dot(&fa);
    let den = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num.abs() / den.sqrt()
}

fn adaptive_iterations(inliers: usize, total: usize, sample_size: i32, cap: usize) -> usize {
    let w = inliers as f64 / total as f64;
    let p = w.powi(sample_size);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = ((1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - p).ln()).ceil();
    if n.is_finite() {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

fn score(f: &Matrix3<f64>, pa: &[Vector2<f64>], pb: &[Vector2<f64>], threshold: f64) -> (Vec<bool>, f64) {
    let mut err = 0.0;
    let mask = pa
        .iter()
        .zip(pb)
        .map(|(a, b)| {
            let d = sampson_distance(f, a, b);
            let inlier = d < threshold;
            if inlier {
                err += d;
            }
            inlier
        })
        .collect();
    (mask, err)
}

/// Robust essential matrix from pixel correspondences `pa[i] <-> pb[i]`.
pub fn estimate_essential_ransac(
    pa: &[Vector2<f64>],
    pb: &[Vector2<f64>],
    k: &CameraIntrinsics,
    iterations: usize,
    threshold: f64,
    seed: u64,
) -> Result<EssentialEstimate> {
    if pa.len() != pb.len() {
        return Err(Error::InvalidArgument(format!(
            "{} vs {} correspondences",
            pa.len(),
            pb.len()
        )));
    }
    let n = pa.len();
    if n < 8 {
        return Err(Error::InsufficientData { needed: 8, got: n });
    }
    if iterations == 0 || !(threshold > 0.0) {
        return Err(Error::InvalidArgument(
            "RANSAC needs iterations > 0 and a positive threshold".into(),
        ));
    }
    let xa: Vec<Vector3<f64>> = pa.iter().map(|p| k.unproject(p)).collect();
    let xb: Vec<Vector3<f64>> = pb.iter().map(|p| k.unproject(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize, f64)> = None;
    let mut needed = iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(&mut rng, n, 8);
        let sa: Vec<Vector3<f64>> = idx.iter().map(|i| xa[i]).collect();
        let sb: Vec<Vector3<f64>> = idx.iter().map(|i| xb[i]).collect();
        let Some(e) = eight_point(&sa, &sb) else { continue };
        let (mask, err) = score(&fundamental_from_essential(&e, k), pa, pb, threshold);
        let count = mask.iter().filter(|&&m| m).count();
        let better = match &best {
            None => true,
            Some((_, _, c, e0)) => count > *c || (count == *c && err < *e0),
        };
        if better {
            needed = adaptive_iterations(count, n, 8, iterations);
            best = Some((e, mask, count, err));
        }
    }
    let Some((mut e, mut mask, mut count, _)) = best else {
        return Err(Error::Degenerate("every minimal sample was degenerate".into()));
    };
    if count < 8 {
        return Err(Error::EstimationFailed(format!(
            "best essential model has only {count} inliers"
        )));
    }
    // Refit on the consensus set until it stops growing.
    for _ in 0..3 {
        let ia: Vec<Vector3<f64>> = xa.iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect();
        let ib: Vec<Vector3<f64>> = xb.iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect();
        let Some(refit) = eight_point(&ia, &ib) else {
            return Err(Error::Degenerate(
                "inlier correspondences do not constrain the epipolar geometry".into(),
            ));
        };
        let (m2, _) = score(&fundamental_from_essential(&refit, k), pa, pb, threshold);
        let c2 = m2.iter().filter(|&&m| m).count();
        if c2 < count {
            break;
        }
        let grew = c2 > count;
        e = refit;
        mask = m2;
        count = c2;
        if !grew {
            break;
        }
    }
    Ok(EssentialEstimate {
        essential: e,
        inlier_mask: mask,
    })
}

/// Linear two-view triangulation in normalised coordinates; returns the
/// point in the frame of camera a.
fn triangulate_normalized(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    xa: &Vector3<f64>,
    xb: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let pa = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let mut pb = Matrix3x4::zeros();
    pb.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    pb.set_column(3, t);
    let mut a = nalgebra::Matrix4::zeros();
    for (row, (p, x)) in [(&pa, xa), (&pb, xb)].iter().enumerate() {
        a.set_row(2 * row, &(x.x * p.row(2) - p.row(0)));
        a.set_row(2 * row + 1, &(x.y * p.row(2) - p.row(1)));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let h = v_t.row(svd.singular_values.imin()).transpose();
    (h[3].abs() > 1e-12).then(|| h.fixed_rows::<3>(0) / h[3])
}

/// The four `(R, t)` factorisations of an essential matrix.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    // Order columns by decreasing singular value so the null direction is last.
    let sv = svd.singular_values;
    let null = sv.imin();
    if null != 2 {
        u.swap_columns(null, 2);
        v_t.swap_rows(null, 2);
    }
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Relative pose of camera b with respect to camera a (`x_b = R x_a + t`,
/// `|t| = 1`) together with the mask of correspondences that land in
/// front of both cameras.
pub fn recover_pose(
    e: &Matrix3<f64>,
    pa: &[Vector2<f64>],
    pb: &[Vector2<f64>],
    inlier_mask: &[bool],
    k: &CameraIntrinsics,
) -> Result<(CameraPose, Vec<bool>)> {
    let total = inlier_mask.iter().filter(|&&m| m).count();
    if total == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let sv = e.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if smax <= 1e-12 || smin > 1e-6 * smax {
        return Err(Error::Degenerate("matrix is not on the essential manifold".into()));
    }
    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>, Vec<bool>)> = None;
    for (r, t) in decompose_essential(e) {
        let mask: Vec<bool> = (0..pa.len())
            .map(|i| {
                if !inlier_mask[i] {
                    return false;
                }
                let (xa, xb) = (k.unproject(&pa[i]), k.unproject(&pb[i]));
                match triangulate_normalized(&r, &t, &xa, &xb) {
                    Some(x) => x.z > 0.0 && (r * x + t).z > 0.0,
                    None => false,
                }
            })
            .collect();
        let count = mask.iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, r, t, mask));
        }
    }
    let (count, r, t, mask) = best.expect("four candidates");
    if 2 * count <= total {
        return Err(Error::EstimationFailed(format!(
            "no decomposition puts a majority of points in front of both cameras ({count} of {total})"
        )));
    }
    Ok((CameraPose::from_rotation_translation(&r, t.normalize()), mask))
}

/// One view of a point to triangulate.
#[derive(Debug, Clone, Copy)]
pub struct ViewObservation<'a> {
    pub pose: &'a CameraPose,
    pub intrinsics: &'a CameraIntrinsics,
    pub pixel: Vector2<f64>,
}

fn bearing(obs: &ViewObservation) -> Vector3<f64> {
    (obs.pose.rotation_matrix().transpose() * obs.intrinsics.unproject(&obs.pixel)).normalize()
}

/// Largest angle in degrees between any two viewing rays.
pub fn max_parallax_deg(observations: &[ViewObservation]) -> f64 {
    let rays: Vec<Vector3<f64>> = observations.iter().map(bearing).collect();
    let mut best: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            best = best.max(rays[i].cross(&rays[j]).norm().atan2(rays[i].dot(&rays[j])));
        }
    }
    best.to_degrees()
}

fn reprojection_residuals(
    x: &Vector3<f64>,
    observations: &[ViewObservation],
) -> Option<Vec<(Vector2<f64>, Vector3<f64>)>> {
    observations
        .iter()
        .map(|o| {
            let pc = o.pose.transform(x);
            if pc.z <= 0.0 {
                return None;
            }
            let k = o.intrinsics;
            let px = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
            Some((px - o.pixel, pc))
        })
        .collect()
}

/// Multi-view DLT followed by one Gauss-Newton step on reprojection error.
pub fn triangulate(observations: &[ViewObservation]) -> Result<Vector3<f64>> {
    if observations.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: observations.len(),
        });
    }
    let parallax = max_parallax_deg(observations);
    if !(parallax >= MIN_PARALLAX_DEG) {
        return Err(Error::LowParallax { angle_deg: parallax });
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, o) in observations.iter().enumerate() {
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&o.pose.rotation_matrix());
        p.set_column(3, &o.pose.translation);
        let x = o.intrinsics.unproject(&o.pixel);
        for (r, row) in [x.x * p.row(2) - p.row(0), x.y * p.row(2) - p.row(1)]
            .iter()
            .enumerate()
        {
            let n = row.norm();
            for c in 0..4 {
                a[(2 * i + r, c)] = row[c] / n;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::EstimationFailed("SVD did not converge".into()))?;
    let h = v_t.row(svd.singular_values.imin()).transpose();
    if h[3].abs() < 1e-12 {
        return Err(Error::LowParallax { angle_deg: parallax });
    }
    let mut x: Vector3<f64> = h.fixed_rows::<3>(0) / h[3];
    // DLT is sign-agnostic; a point behind every camera is the mirror solution.
    for (view, o) in observations.iter().enumerate() {
        let depth = o.pose.transform(&x).z;
        if depth <= 0.0 {
            return Err(Error::Cheirality { view, depth });
        }
    }
    if let Some(res) = reprojection_residuals(&x, observations) {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut cost = 0.0;
        for ((r, pc), o) in res.iter().zip(observations) {
            let j = perspective_jacobian(pc, o.intrinsics) * o.pose.rotation_matrix();
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
            cost += r.norm_squared();
        }
        if let Some(inv) = jtj.try_inverse() {
            let cand = x - inv * jtr;
            if let Some(res2) = reprojection_residuals(&cand, observations) {
                if res2.iter().map(|(r, _)| r.norm_squared()).sum::<f64>() <= cost {
                    x = cand;
                }
            }
        }
    }
    Ok(x)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_angle_between, EulerAngles};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap()
    }

    fn scene(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(4.0..7.0),
                )
            })
            .collect()
    }

    fn second_pose() -> CameraPose {
        CameraPose::new(EulerAngles::new(0.02, -0.12, 0.03), Vector3::new(-0.8, 0.1, 0.05))
    }

    fn observe(points: &[Vector3<f64>], pose: &CameraPose) -> Vec<Vector2<f64>> {
        points.iter().map(|x| project(x, pose, &k()).unwrap().pixel).collect()
    }

    #[test]
    fn exact_correspondences_are_all_inliers() {
        let pts = scene(1, 100);
        let (pa, pb) = (observe(&pts, &CameraPose::identity()), observe(&pts, &second_pose()));
        let est = estimate_essential_ransac(&pa, &pb, &k(), 2048, 1.5, 7).unwrap();
        assert_eq!(est.inlier_count(), 100);
        let f = fundamental_from_essential(&est.essential, &k());
        for (a, b) in pa.iter().zip(&pb) {
            assert!(sampson_distance(&f, a, b) < 1e-6);
            let (xa, xb) = (k().unproject(a), k().unproject(b));
            assert!(xb.dot(&(est.essential * xa)).abs() < 1e-6);
        }
        let sv = est.essential.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!((s[0] - s[1]).abs() < 1e-9 * s[0] && s[2] < 1e-9 * s[0]);
    }

    #[test]
    fn outliers_are_rejected() {
        let pts = scene(2, 100);
        let (pa, mut pb) = (observe(&pts, &CameraPose::identity()), observe(&pts, &second_pose()));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let outlier: Vec<bool> = (0..100).map(|i| i % 10 < 3).collect();
        for (i, p) in pb.iter_mut().enumerate() {
            if outlier[i] {
                *p = Vector2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            }
        }
        let est = estimate_essential_ransac(&pa, &pb, &k(), 2048, 1.5, 3).unwrap();
        let flagged = est.inlier_mask.iter().filter(|&&m| m).count();
        let correct = est.inlier_mask.iter().zip(&outlier).filter(|(&m, &o)| m && !o).count();
        assert!(correct as f64 / flagged as f64 >= 0.95, "{correct}/{flagged}");
        assert!(correct >= 65);
    }

    #[test]
    fn points_on_epipolar_plane_are_degenerate() {
        // Every point lies in the plane y = 0, which contains both centres.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vector3<f64>> = (0..40)
            .map(|_| Vector3::new(rng.random_range(-1.5..1.5), 0.0, rng.random_range(4.0..7.0)))
            .collect();
        let pose_b = CameraPose::new(EulerAngles::ZERO, Vector3::new(-0.8, 0.0, 0.0));
        let (pa, pb) = (observe(&pts, &CameraPose::identity()), observe(&pts, &pose_b));
        assert!(estimate_essential_ransac(&pa, &pb, &k(), 256, 1.5, 1).is_err());
    }

    #[test]
    fn too_few_correspondences() {
        let p = vec![Vector2::zeros(); 7];
        assert!(matches!(
            estimate_essential_ransac(&p, &p, &k(), 10, 1.0, 0),
            Err(Error::InsufficientData { needed: 8, got: 7 })
        ));
    }

    #[test]
    fn decomposition_recovers_constructed_pose() {
        for sign in [1.0, -1.0] {
            let pose = second_pose();
            let t = sign * pose.translation;
            let truth = CameraPose::from_rotation_translation(&pose.rotation_matrix(), t);
            let e = skew(&t) * pose.rotation_matrix();
            // Points must be in front of both cameras for the chosen sign.
            let pts: Vec<Vector3<f64>> = scene(5, 60)
                .into_iter()
                .filter(|x| truth.transform(x).z > 0.0)
                .collect();
            let (pa, pb) = (observe(&pts, &CameraPose::identity()), observe(&pts, &truth));
            let mask = vec![true; pts.len()];
            let (rel, cheiral) = recover_pose(&e, &pa, &pb, &mask, &k()).unwrap();
            assert!(rotation_angle_between(&rel.rotation_matrix(), &truth.rotation_matrix()) < 1e-6);
            assert!((rel.translation - t.normalize()).norm() < 1e-6);
            assert!(cheiral.iter().all(|&c| c));
        }
    }

    #[test]
    fn pure_rotation_is_rejected() {
        let pts = scene(6, 60);
        let rot = CameraPose::new(EulerAngles::new(0.05, 0.1, 0.0), Vector3::zeros());
        let (pa, pb) = (observe(&pts, &CameraPose::identity()), observe(&pts, &rot));
        assert!(estimate_essential_ransac(&pa, &pb, &k(), 512, 1.5, 2).is_err());
        assert!(recover_pose(&Matrix3::zeros(), &pa, &pb, &vec![true; 60], &k()).is_err());
    }

    #[test]
    fn triangulates_exact_point() {
        let x = Vector3::new(0.0, 0.0, 4.0);
        let poses = [
            CameraPose::identity(),
            CameraPose::new(EulerAngles::ZERO, Vector3::new(-1.0, 0.0, 0.0)),
        ];
        let kk = k();
        let obs: Vec<ViewObservation> = poses
            .iter()
            .map(|p| ViewObservation {
                pose: p,
                intrinsics: &kk,
                pixel: project(&x, p, &kk).unwrap().pixel,
            })
            .collect();
        assert!((triangulate(&obs).unwrap() - x).norm() < 1e-6);
    }

    #[test]
    fn identical_centres_have_no_parallax() {
        let kk = k();
        let p = CameraPose::identity();
        let q = CameraPose::new(EulerAngles::new(0.0, 0.1, 0.0), Vector3::zeros());
        let x = Vector3::new(0.2, 0.1, 4.0);
        let obs = [
            ViewObservation {
                pose: &p,
                intrinsics: &kk,
                pixel: project(&x, &p, &kk).unwrap().pixel,
            },
            ViewObservation {
                pose: &q,
                intrinsics: &kk,
                pixel: project(&x, &q, &kk).unwrap().pixel,
            },
        ];
        assert!(matches!(triangulate(&obs), Err(Error::LowParallax { .. })));
    }

    #[test]
    fn point_behind_cameras_is_rejected() {
        let kk = k();
        let poses = [
            CameraPose::identity(),
            CameraPose::new(EulerAngles::ZERO, Vector3::new(-1.0, 0.0, 0.0)),
        ];
        let x = Vector3::new(0.3, 0.2, -4.0);
        // Pixels of the mirrored point as seen through the image plane.
        let obs: Vec<ViewObservation> = poses
            .iter()
            .map(|p| {
                let pc = p.transform(&x);
                ViewObservation {
                    pose: p,
                    intrinsics: &kk,
                    pixel: Vector2::new(kk.fx * pc.x / pc.z + kk.cx, kk.fy * pc.y / pc.z + kk.cy),
                }
            })
            .collect();
        assert!(matches!(triangulate(&obs), Err(Error::Cheirality { .. })));
    }

    #[test]
    fn noisy_multiview_triangulation() {
        let kk = k();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let poses: Vec<CameraPose> = (0..4)
            .map(|i| {
                CameraPose::new(
                    EulerAngles::new(0.0, -0.05 * i as f64, 0.0),
                    Vector3::new(-0.5 * i as f64, 0.0, 0.0),
                )
            })
            .collect();
        let mut total = 0.0;
        let mut count = 0;
        for x in scene(8, 30) {
            let obs: Vec<ViewObservation> = poses
                .iter()
                .map(|p| {
                    let px = project(&x, p, &kk).unwrap().pixel;
                    ViewObservation {
                        pose: p,
                        intrinsics: &kk,
                        pixel: px + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
                    }
                })
                .collect();
            let est = triangulate(&obs).unwrap();
            for o in &obs {
                total += (project(&est, o.pose, &kk).unwrap().pixel - o.pixel).norm_squared();
                count += 1;
            }
        }
        assert!((total / count as f64).sqrt() <= 1.0);
    }
}
