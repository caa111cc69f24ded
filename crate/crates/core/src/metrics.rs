//! Image-quality and trajectory-accuracy metrics.

use nalgebra::{Isometry3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::image::ImageBuffer;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )))
    }
}

pub fn mean_squared_error(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for unit peak. Identical images give
/// `f64::INFINITY`.
pub fn compute_psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let mse = mean_squared_error(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" correlation with the SSIM window.
struct WindowFilter {
    kernel: [f64; SSIM_WINDOW],
    width: usize,
    height: usize,
}

impl WindowFilter {
    fn new(width: usize, height: usize) -> Self {
        Self {
            kernel: gaussian_kernel(),
            width,
            height,
        }
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.width + 1 - SSIM_WINDOW, self.height + 1 - SSIM_WINDOW)
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (ow, oh) = self.out_dims();
        let mut tmp = vec![0.0; ow * self.height];
        for y in 0..self.height {
            let row = &src[y * self.width..(y + 1) * self.width];
            for x in 0..ow {
                tmp[y * ow + x] = self
                    .kernel
                    .iter()
                    .zip(&row[x..x + SSIM_WINDOW])
                    .map(|(k, v)| k * v)
                    .sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WINDOW).map(|i| self.kernel[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        out
    }

    /// Transpose of [`WindowFilter::apply`]: scatters a window map back onto
    /// the full plane.
    fn adjoint(&self, map: &[f64]) -> Vec<f64> {
        let (ow, oh) = self.out_dims();
        let mut tmp = vec![0.0; ow * self.height];
        for y in 0..oh {
            for i in 0..SSIM_WINDOW {
                for x in 0..ow {
                    tmp[(y + i) * ow + x] += self.kernel[i] * map[y * ow + x];
                }
            }
        }
        let mut out = vec![0.0; self.width * self.height];
        for y in 0..self.height {
            for x in 0..ow {
                let v = tmp[y * ow + x];
                for i in 0..SSIM_WINDOW {
                    out[y * self.width + x + i] += self.kernel[i] * v;
                }
            }
        }
        out
    }
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

fn check_ssim_input(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    check_shapes(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {:?}",
            a.dimensions()
        )));
    }
    Ok(())
}

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) fully inside the
/// image, averaged over the three channels.
pub fn compute_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM together with its gradient with respect to `a`.
pub fn ssim_with_gradient(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, want_grad: bool) -> Result<(f64, Option<ImageBuffer>)> {
    check_ssim_input(a, b)?;
    let (w, h) = a.dimensions();
    let filter = WindowFilter::new(w, h);
    let (ow, oh) = filter.out_dims();
    let norm = 1.0 / (3 * ow * oh) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);

    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter.apply(&x), filter.apply(&y));
        let (exx, eyy, exy) = (filter.apply(&xx), filter.apply(&yy), filter.apply(&xy));

        let n = ow * oh;
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                d_mx[i] = 2.0 * uy * (n2 - n1) / (d1 * d2) - 2.0 * ux * s / d1 + 2.0 * ux * s / d2;
                d_exx[i] = -s / d2;
                d_exy[i] = 2.0 * n1 / (d1 * d2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let ga = filter.adjoint(&d_mx);
            let gb = filter.adjoint(&d_exx);
            let gc = filter.adjoint(&d_exy);
            for p in 0..w * h {
                g[p * 3 + c] = norm * (ga[p] + 2.0 * x[p] * gb[p] + y[p] * gc[p]);
            }
        }
    }
    let grad = grad.map(|g| ImageBuffer::from_raw(w, h, g).expect("shape"));
    Ok((total * norm, grad))
}

/// Ordered poses with per-pose labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
    pub ids: Vec<String>,
}

impl Trajectory {
    pub fn new(poses: Vec<CameraPose>, ids: Vec<String>) -> Result<Self> {
        if poses.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} poses but {} ids",
                poses.len(),
                ids.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate trajectory id {dup:?}")));
        }
        Ok(Self { poses, ids })
    }

    /// Labels the poses `0, 1, 2, ...`.
    pub fn from_poses(poses: Vec<CameraPose>) -> Self {
        let ids = (0..poses.len()).map(|i| i.to_string()).collect();
        Self { poses, ids }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(CameraPose::center).collect()
    }

    /// Applies `x -> s R x + t` to the world frame: camera centres move
    /// accordingly and camera orientations are preserved relative to the scene.
    pub fn transformed(&self, alignment: &AlignmentResult) -> Trajectory {
        let poses = self
            .poses
            .iter()
            .map(|p| {
                let r = p.rotation_matrix() * alignment.rotation.transpose();
                let c = alignment.apply(&p.center());
                CameraPose::from_rotation_translation(&r, -(r * c))
            })
            .collect();
        Trajectory {
            poses,
            ids: self.ids.clone(),
        }
    }
}

/// Similarity `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl AlignmentResult {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Closed-form least-squares similarity (or rigid, with `with_scale =
/// false`) transform taking `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<AlignmentResult> {
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (ds, dd) = (s - mu_s, d - mu_d);
        cov += dd * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    if sv[0] <= 0.0 || sv[1] <= 1e-10 * sv[0] {
        return Err(Error::Degenerate("point sets are collinear or coincident".into()));
    }
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        signs[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = if with_scale {
        sv.component_mul(&signs).sum() / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * rotation * mu_s;
    Ok(AlignmentResult {
        scale,
        rotation,
        translation,
    })
}

/// Similarity aligning the estimated camera centres onto the reference.
pub fn umeyama_align(estimated: &Trajectory, reference: &Trajectory) -> Result<AlignmentResult> {
    if estimated.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            estimated.len(),
            reference.len()
        )));
    }
    umeyama(&estimated.centers(), &reference.centers(), true)
}

/// RMS camera-centre error after similarity alignment.
pub fn compute_ate(estimated: &Trajectory, reference: &Trajectory) -> Result<f64> {
    let al = umeyama_align(estimated, reference)?;
    let sq: f64 = estimated
        .centers()
        .iter()
        .zip(reference.centers())
        .map(|(e, r)| (al.apply(e) - r).norm_squared())
        .sum();
    Ok((sq / estimated.len() as f64).sqrt())
}

/// Relative pose error over index step `delta`: RMS translation error and
/// RMS rotation error in degrees. No alignment is applied, so the
/// translation part assumes both trajectories share a scale.
pub fn compute_rpe(estimated: &Trajectory, reference: &Trajectory, delta: usize) -> Result<(f64, f64)> {
    if estimated.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            estimated.len(),
            reference.len()
        )));
    }
    if delta == 0 || estimated.len() <= delta {
        return Err(Error::InsufficientData {
            needed: delta.max(1) + 1,
            got: estimated.len(),
        });
    }
    let to_c2w = |p: &CameraPose| -> Isometry3<f64> { p.to_isometry().inverse() };
    let est: Vec<_> = estimated.poses.iter().map(to_c2w).collect();
    let gt: Vec<_> = reference.poses.iter().map(to_c2w).collect();
    let mut t_sq = 0.0;
    let mut r_sq = 0.0;
    let pairs = est.len() - delta;
    for i in 0..pairs {
        let rel_est = est[i].inverse() * est[i + delta];
        let rel_gt = gt[i].inverse() * gt[i + delta];
        let err = rel_gt.inverse() * rel_est;
        t_sq += err.translation.vector.norm_squared();
        r_sq += err.rotation.angle().to_degrees().powi(2);
    }
    Ok(((t_sq / pairs as f64).sqrt(), (r_sq / pairs as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EulerAngles;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    // Direct per-window SSIM with 2D weights, independent of the separable
    // filter used by the implementation.
    fn ssim_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let r = 5i64;
        let mut w2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for i in -r..=r {
            for j in -r..=r {
                let v = (-((i * i + j * j) as f64) / (2.0 * 1.5 * 1.5)).exp();
                w2[(i + r) as usize][(j + r) as usize] = v;
                s += v;
            }
        }
        let (w, h) = a.dimensions();
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..3 {
            for cy in 5..h - 5 {
                for cx in 5..w - 5 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wt = w2[dy][dx] / s;
                            let x = a.get(cx + dx - 5, cy + dy - 5)[c];
                            let y = b.get(cx + dx - 5, cy + dy - 5)[c];
                            mx += wt * x;
                            my += wt * y;
                            sxx += wt * x * x;
                            syy += wt * y * y;
                            sxy += wt * x * y;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    total +=
                        ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(8, 8, &mut rng);
        assert_eq!(compute_psnr(&a, &a).unwrap(), f64::INFINITY);
        let a = ImageBuffer::filled(8, 8, [0.5; 3]);
        let b = ImageBuffer::filled(8, 8, [0.6; 3]);
        assert_relative_eq!(compute_psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_matches_formula_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(9, 7, &mut rng);
        let b = random_image(9, 7, &mut rng);
        let mut mse = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            mse += (x - y).powi(2);
        }
        mse /= (9 * 7 * 3) as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((compute_psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert_eq!(compute_psnr(&a, &b).unwrap(), compute_psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch() {
        assert!(compute_psnr(&ImageBuffer::new(4, 4), &ImageBuffer::new(4, 5)).is_err());
    }

    #[test]
    fn ssim_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(16, 13, &mut rng);
        assert_relative_eq!(compute_ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let c = ImageBuffer::filled(12, 12, [0.5; 3]);
        assert_relative_eq!(compute_ssim(&c, &c).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(17, 14, &mut rng);
        let b = random_image(17, 14, &mut rng);
        assert!((compute_ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
        assert!((compute_ssim(&a, &b).unwrap() - compute_ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_negative_for_inverted_checkerboard() {
        let a = ImageBuffer::from_fn(16, 16, |u, v| [if (u + v) % 2 == 0 { 0.7 } else { 0.3 }; 3]);
        let b = a.map(|x| 1.0 - x);
        assert!(compute_ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        assert!(compute_ssim(&ImageBuffer::new(10, 20), &ImageBuffer::new(10, 20)).is_err());
        assert!(compute_ssim(&ImageBuffer::new(12, 12), &ImageBuffer::new(12, 13)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(13, 12, &mut rng);
        let b = random_image(13, 12, &mut rng);
        let (s, g) = ssim_with_gradient(&a, &b).unwrap();
        assert_eq!(s, compute_ssim(&a, &b).unwrap());
        let h = 1e-6;
        for idx in [0, 7, 40, 100, 200, 300, 13 * 12 * 3 - 1] {
            let mut ap = a.clone();
            ap.data_mut()[idx] += h;
            let mut am = a.clone();
            am.data_mut()[idx] -= h;
            let fd = (compute_ssim(&ap, &b).unwrap() - compute_ssim(&am, &b).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.data()[idx]).abs() < 1e-7 * (1.0 + fd.abs()),
                "idx {idx}: {fd} vs {}",
                g.data()[idx]
            );
        }
    }

    fn random_trajectory(n: usize, rng: &mut ChaCha8Rng) -> Trajectory {
        let poses = (0..n)
            .map(|_| {
                CameraPose::new(
                    EulerAngles::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ),
                )
            })
            .collect();
        Trajectory::from_poses(poses)
    }

    #[test]
    fn self_alignment_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_trajectory(6, &mut rng);
        let al = umeyama_align(&t, &t).unwrap();
        assert_relative_eq!(al.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(al.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert!(al.translation.norm() < 1e-12);
        assert!(compute_ate(&t, &t).unwrap() < 1e-12);
    }

    #[test]
    fn alignment_recovers_scale_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reference = random_trajectory(10, &mut rng);
        let rz = EulerAngles::new(0.0, 0.0, 30f64.to_radians()).to_matrix();
        let sim = AlignmentResult {
            scale: 2.0,
            rotation: rz,
            translation: Vector3::zeros(),
        };
        let estimated = reference.transformed(&sim);
        let al = umeyama_align(&estimated, &reference).unwrap();
        assert!((al.scale - 0.5).abs() < 1e-9);
        let expected = EulerAngles::new(0.0, 0.0, -30f64.to_radians()).to_matrix();
        assert!((al.rotation - expected).abs().max() < 1e-9);
    }

    #[test]
    fn collinear_centres_are_degenerate() {
        let poses = (0..5)
            .map(|i| CameraPose::new(EulerAngles::ZERO, Vector3::new(i as f64, 0.0, 0.0)))
            .collect();
        let t = Trajectory::from_poses(poses);
        assert!(matches!(umeyama_align(&t, &t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let p = vec![CameraPose::identity(); 2];
        assert!(Trajectory::new(p, vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn ate_of_noisy_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reference = random_trajectory(100, &mut rng);
        // RMS noise magnitude 0.01: per-axis sigma 0.01 / sqrt(3).
        let noise = Normal::new(0.0, 0.01 / 3f64.sqrt()).unwrap();
        let poses = reference
            .poses
            .iter()
            .map(|p| {
                let c = p.center() + Vector3::from_fn(|_, _| noise.sample(&mut rng));
                let r = p.rotation_matrix();
                CameraPose::from_rotation_translation(&r, -(r * c))
            })
            .collect();
        let noisy = Trajectory::from_poses(poses);
        let ate = compute_ate(&noisy, &reference).unwrap();
        assert!((0.007..=0.013).contains(&ate), "ate {ate}");
    }

    #[test]
    fn ate_invariant_under_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let reference = random_trajectory(8, &mut rng);
        let sim = AlignmentResult {
            scale: 3.7,
            rotation: EulerAngles::new(0.4, -1.2, 2.0).to_matrix(),
            translation: Vector3::new(1.0, -5.0, 2.5),
        };
        let moved = reference.transformed(&sim);
        assert!(compute_ate(&moved, &reference).unwrap() < 1e-9);
    }

    #[test]
    fn rpe_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reference = random_trajectory(7, &mut rng);
        let (t, r) = compute_rpe(&reference, &reference, 1).unwrap();
        assert!(t < 1e-12 && r < 1e-9);
        let rigid = AlignmentResult {
            scale: 1.0,
            rotation: EulerAngles::new(-0.3, 0.9, 0.1).to_matrix(),
            translation: Vector3::new(0.5, 0.2, -1.0),
        };
        let moved = reference.transformed(&rigid);
        let (t, r) = compute_rpe(&moved, &reference, 1).unwrap();
        assert!(t < 1e-9 && r < 1e-9, "{t} {r}");
        let (t, r) = compute_rpe(&reference, &moved, 2).unwrap();
        assert!(t < 1e-9 && r < 1e-9, "{t} {r}");
    }

    #[test]
    fn rpe_measures_injected_rotation() {
        let a = CameraPose::identity();
        let b = CameraPose::new(EulerAngles::new(0.0, 0.2, 0.0), Vector3::new(0.3, 0.0, 0.1));
        let reference = Trajectory::from_poses(vec![a, b]);
        // Rotate the second camera by an extra 5 degrees about its optical axis.
        let extra = EulerAngles::new(0.0, 0.0, 5f64.to_radians()).to_matrix();
        let r = extra * b.rotation_matrix();
        let b2 = CameraPose::from_rotation_translation(&r, extra * b.translation);
        let estimated = Trajectory::from_poses(vec![a, b2]);
        let (t, rot) = compute_rpe(&estimated, &reference, 1).unwrap();
        assert!((rot - 5.0).abs() < 1e-9, "{rot}");
        assert!(t < 1e-12);
    }

    #[test]
    fn rpe_requires_enough_poses() {
        let t = Trajectory::from_poses(vec![CameraPose::identity(); 2]);
        assert!(compute_rpe(&t, &t, 2).is_err());
    }
}
