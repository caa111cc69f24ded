//! Sparse reconstruction used to seed the joint optimisation: features,
//! pairwise geometric verification, a two-view bootstrap, incremental PnP
//! registration, triangulation and robust bundle adjustment.

mod bundle;
mod features;
mod pnp;
mod two_view;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use bundle::{bundle_adjust, huber_cost, BundleReport};
pub use features::{detect_features, match_features, Keypoint, MatchPair, DESCRIPTOR_LEN, MIN_DETECT_SIZE};
pub use pnp::{grunert_quartic, p3p, real_roots, refine_pose_gn, solve_pnp_ransac, PnpEstimate};
pub use two_view::{
    decompose_essential, estimate_essential_ransac, fundamental_from_essential, max_parallax_deg, project_to_essential,
    recover_pose, sampson_distance, skew, triangulate, EssentialEstimate, ViewObservation, MIN_PARALLAX_DEG,
};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::ImageBuffer;
use crate::render::{GaussianCloud, GaussianPrimitive};

/// One sighting of a reconstructed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image: usize,
    pub keypoint: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmReconstruction {
    /// Registered images only.
    pub poses: BTreeMap<usize, CameraPose>,
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    /// `tracks[i]` lists the registered observations of `points[i]`.
    pub tracks: Vec<Vec<Observation>>,
    /// Image whose pose is held at the identity.
    pub reference: usize,
    /// Image whose distance from the reference fixes the global scale.
    pub scale_anchor: Option<usize>,
}

impl SfmReconstruction {
    pub fn registered(&self) -> Vec<usize> {
        self.poses.keys().copied().collect()
    }

    pub fn observation_count(&self) -> usize {
        self.tracks.iter().map(Vec::len).sum()
    }

    /// Mean pixel distance between observations and reprojected points.
    pub fn mean_reprojection_error(&self, k: &CameraIntrinsics) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (x, track) in self.points.iter().zip(&self.tracks) {
            for o in track {
                let pc = self.poses[&o.image].transform(x);
                let px = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
                sum += (px - o.pixel).norm();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmConfig {
    pub ratio: f64,
    pub ransac_iterations: usize,
    /// Sampson distance threshold in pixels for pairwise verification.
    pub ransac_threshold: f64,
    /// Reprojection threshold in pixels for PnP.
    pub pnp_threshold: f64,
    pub min_pair_inliers: usize,
    pub min_registration_points: usize,
    /// Observations reprojecting further than this are dropped from tracks.
    pub max_reprojection_error: f64,
    pub ba_iterations: usize,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            ransac_iterations: 2048,
            ransac_threshold: 1.5,
            pnp_threshold: 2.0,
            min_pair_inliers: 16,
            min_registration_points: 8,
            max_reprojection_error: 4.0,
            ba_iterations: 50,
            huber_delta: 2.0,
            seed: 0,
        }
    }
}

impl SfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!(
                "match ratio must lie in (0, 1), got {}",
                self.ratio
            )));
        }
        if self.ransac_iterations == 0 {
            return Err(Error::Config("RANSAC needs at least one iteration".into()));
        }
        for (name, v) in [
            ("ransac_threshold", self.ransac_threshold),
            ("pnp_threshold", self.pnp_threshold),
            ("max_reprojection_error", self.max_reprojection_error),
            ("huber_delta", self.huber_delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.min_pair_inliers < 8 || self.min_registration_points < 4 {
            return Err(Error::Config(
                "min_pair_inliers must be >= 8 and min_registration_points >= 4".into(),
            ));
        }
        Ok(())
    }
}

/// Detect features in every image and reconstruct.
pub fn run_initialization(
    images: &[ImageBuffer],
    k: &CameraIntrinsics,
    config: &SfmConfig,
) -> Result<SfmReconstruction> {
    check_images(images, k)?;
    let features: Vec<Vec<Keypoint>> = images.par_iter().map(detect_features).collect::<Result<_>>()?;
    for (i, f) in features.iter().enumerate() {
        log::debug!("image {i}: {} keypoints", f.len());
    }
    reconstruct_from_features(&features, images, k, config)
}

fn check_images(images: &[ImageBuffer], k: &CameraIntrinsics) -> Result<()> {
    if images.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: images.len(),
        });
    }
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (k.width, k.height) {
            return Err(Error::InvalidArgument(format!(
                "image {i} is {:?}, intrinsics expect {}x{}",
                img.dimensions(),
                k.width,
                k.height
            )));
        }
    }
    Ok(())
}

/// Keypoints at the projected centre of every visible Gaussian, with one
/// random descriptor per Gaussian shared across views, so matching is exact.
pub fn exact_correspondences(
    cloud: &GaussianCloud,
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    seed: u64,
) -> Vec<Vec<Keypoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let descriptors: Vec<Vec<f64>> = (0..cloud.len())
        .map(|_| {
            let d: Vec<f64> = (0..DESCRIPTOR_LEN).map(|_| rng.random::<f64>()).collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            d.into_iter().map(|x| x / n).collect()
        })
        .collect();
    poses
        .iter()
        .map(|pose| {
            cloud
                .gaussians
                .iter()
                .zip(&descriptors)
                .filter_map(|(g, d)| {
                    let pc = pose.transform(&g.position);
                    if pc.z <= 0.0 {
                        return None;
                    }
                    let px = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
                    k.contains(&px).then(|| Keypoint {
                        position: px,
                        scale: 1.0,
                        orientation: 0.0,
                        descriptor: d.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

struct VerifiedPair {
    a: usize,
    b: usize,
    inliers: Vec<(usize, usize)>,
}

fn pair_seed(seed: u64, a: usize, b: usize) -> u64 {
    seed ^ ((a as u64) << 32 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn verify_pairs(features: &[Vec<Keypoint>], k: &CameraIntrinsics, config: &SfmConfig) -> Vec<VerifiedPair> {
    let n = features.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    pairs
        .par_iter()
        .filter_map(|&(a, b)| {
            let m = match_features(&features[a], &features[b], config.ratio);
            if m.correspondences.len() < config.min_pair_inliers {
                return None;
            }
            let pa: Vec<Vector2<f64>> = m
                .correspondences
                .iter()
                .map(|&(i, _)| features[a][i].position)
                .collect();
            let pb: Vec<Vector2<f64>> = m
                .correspondences
                .iter()
                .map(|&(_, j)| features[b][j].position)
                .collect();
            let est = estimate_essential_ransac(
                &pa,
                &pb,
                k,
                config.ransac_iterations,
                config.ransac_threshold,
                pair_seed(config.seed, a, b),
            );
            match est {
                Ok(e) if e.inlier_count() >= config.min_pair_inliers => {
                    let inliers = m
                        .correspondences
                        .iter()
                        .zip(&e.inlier_mask)
                        .filter(|(_, &ok)| ok)
                        .map(|(c, _)| *c)
                        .collect();
                    Some(VerifiedPair { a, b, inliers })
                }
                Ok(_) => None,
                Err(err) => {
                    log::debug!("pair ({a}, {b}) rejected: {err}");
                    None
                }
            }
        })
        .collect()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of pairwise matches. Components that hold two
/// different keypoints of the same image are discarded.
fn build_tracks(features: &[Vec<Keypoint>], pairs: &[VerifiedPair]) -> Vec<Vec<(usize, usize)>> {
    let mut offset = vec![0usize; features.len() + 1];
    for (i, f) in features.iter().enumerate() {
        offset[i + 1] = offset[i] + f.len();
    }
    let mut parent: Vec<usize> = (0..offset[features.len()]).collect();
    for p in pairs {
        for &(i, j) in &p.inliers {
            let (ra, rb) = (find(&mut parent, offset[p.a] + i), find(&mut parent, offset[p.b] + j));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for img in 0..features.len() {
        for kp in 0..features[img].len() {
            let root = find(&mut parent, offset[img] + kp);
            groups.entry(root).or_default().push((img, kp));
        }
    }
    groups
        .into_values()
        .filter(|t| {
            let images: BTreeSet<usize> = t.iter().map(|o| o.0).collect();
            t.len() >= 2 && images.len() == t.len()
        })
        .collect()
}

/// Incremental reconstruction state, indexed by track.
struct Builder<'a> {
    features: &'a [Vec<Keypoint>],
    k: &'a CameraIntrinsics,
    config: &'a SfmConfig,
    tracks: Vec<Vec<(usize, usize)>>,
    points: Vec<Option<Vector3<f64>>>,
    /// Images whose observation of the track was judged an outlier.
    rejected: Vec<BTreeSet<usize>>,
    poses: BTreeMap<usize, CameraPose>,
    reference: usize,
    anchor: usize,
}

impl Builder<'_> {
    fn pixel(&self, img: usize, kp: usize) -> Vector2<f64> {
        self.features[img][kp].position
    }

    fn usable(&self, t: usize) -> Vec<(usize, usize)> {
        self.tracks[t]
            .iter()
            .copied()
            .filter(|(img, _)| self.poses.contains_key(img) && !self.rejected[t].contains(img))
            .collect()
    }

    fn reprojection(&self, x: &Vector3<f64>, img: usize, kp: usize) -> f64 {
        let pc = self.poses[&img].transform(x);
        if pc.z <= 0.0 {
            return f64::INFINITY;
        }
        let k = self.k;
        (Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - self.pixel(img, kp)).norm()
    }

    fn triangulate_missing(&mut self) -> usize {
        let mut added = 0;
        for t in 0..self.tracks.len() {
            if self.points[t].is_some() {
                continue;
            }
            let obs = self.usable(t);
            if obs.len() < 2 {
                continue;
            }
            let views: Vec<ViewObservation> = obs
                .iter()
                .map(|&(img, kp)| ViewObservation {
                    pose: &self.poses[&img],
                    intrinsics: self.k,
                    pixel: self.pixel(img, kp),
                })
                .collect();
            let Ok(x) = triangulate(&views) else { continue };
            if obs
                .iter()
                .all(|&(img, kp)| self.reprojection(&x, img, kp) < self.config.max_reprojection_error)
            {
                self.points[t] = Some(x);
                added += 1;
            }
        }
        added
    }

    /// Drop observations that reproject badly and points left with fewer
    /// than two of them.
    fn filter(&mut self) {
        for t in 0..self.tracks.len() {
            let Some(x) = self.points[t] else { continue };
            for (img, kp) in self.usable(t) {
                if !(self.reprojection(&x, img, kp) < self.config.max_reprojection_error) {
                    self.rejected[t].insert(img);
                }
            }
            if self.usable(t).len() < 2 {
                self.points[t] = None;
            }
        }
    }

    fn assemble(&self) -> (SfmReconstruction, Vec<usize>) {
        let mut ids = Vec::new();
        let mut points = Vec::new();
        let mut tracks = Vec::new();
        for t in 0..self.tracks.len() {
            let Some(x) = self.points[t] else { continue };
            let obs: Vec<Observation> = self
                .usable(t)
                .into_iter()
                .map(|(image, keypoint)| Observation {
                    image,
                    keypoint,
                    pixel: self.pixel(image, keypoint),
                })
                .collect();
            ids.push(t);
            points.push(x);
            tracks.push(obs);
        }
        let recon = SfmReconstruction {
            poses: self.poses.clone(),
            colors: vec![[0.5; 3]; points.len()],
            points,
            tracks,
            reference: self.reference,
            scale_anchor: Some(self.anchor),
        };
        (recon, ids)
    }

    fn adjust(&mut self) -> Result<()> {
        let (recon, ids) = self.assemble();
        let (out, report) = bundle_adjust(&recon, self.k, self.config.ba_iterations, self.config.huber_delta)?;
        log::debug!(
            "bundle adjustment over {} views, {} points: cost {:.4e} -> {:.4e}",
            out.poses.len(),
            out.points.len(),
            report.initial_cost(),
            report.final_cost()
        );
        self.poses = out.poses;
        for (t, x) in ids.into_iter().zip(out.points) {
            self.points[t] = Some(x);
        }
        self.filter();
        Ok(())
    }

    fn correspondences_2d3d(&self, img: usize) -> Vec<(usize, Vector3<f64>, Vector2<f64>)> {
        let mut out = Vec::new();
        for (t, track) in self.tracks.iter().enumerate() {
            let Some(x) = self.points[t] else { continue };
            if let Some(&(_, kp)) = track.iter().find(|(i, _)| *i == img) {
                out.push((t, x, self.pixel(img, kp)));
            }
        }
        out
    }

    fn try_bootstrap(&mut self, pair: &VerifiedPair) -> Result<usize> {
        let pa: Vec<Vector2<f64>> = pair.inliers.iter().map(|&(i, _)| self.pixel(pair.a, i)).collect();
        let pb: Vec<Vector2<f64>> = pair.inliers.iter().map(|&(_, j)| self.pixel(pair.b, j)).collect();
        let est = estimate_essential_ransac(
            &pa,
            &pb,
            self.k,
            self.config.ransac_iterations,
            self.config.ransac_threshold,
            pair_seed(self.config.seed, pair.a, pair.b),
        )?;
        let (rel, _) = recover_pose(&est.essential, &pa, &pb, &est.inlier_mask, self.k)?;
        self.poses.clear();
        self.poses.insert(pair.a, CameraPose::identity());
        self.poses.insert(pair.b, rel);
        self.reference = pair.a;
        self.anchor = pair.b;
        self.points.iter_mut().for_each(|p| *p = None);
        self.rejected.iter_mut().for_each(BTreeSet::clear);
        let added = self.triangulate_missing();
        if added < self.config.min_pair_inliers {
            return Err(Error::EstimationFailed(format!(
                "only {added} points triangulated from the initial pair"
            )));
        }
        self.adjust()?;
        Ok(added)
    }
}

/// Change of world frame that puts image `reference` at the identity.
fn reanchor(poses: &mut BTreeMap<usize, CameraPose>, points: &mut [Vector3<f64>], reference: usize) {
    let r0 = poses[&reference].rotation_matrix();
    let t0 = poses[&reference].translation;
    for (&i, p) in poses.iter_mut() {
        *p = if i == reference {
            CameraPose::identity()
        } else {
            let r = p.rotation_matrix() * r0.transpose();
            CameraPose::from_rotation_translation(&r, p.translation - r * t0)
        };
    }
    for x in points.iter_mut() {
        *x = r0 * *x + t0;
    }
}

/// Incremental reconstruction from precomputed keypoints. `images`
/// supplies point colours.
pub fn reconstruct_from_features(
    features: &[Vec<Keypoint>],
    images: &[ImageBuffer],
    k: &CameraIntrinsics,
    config: &SfmConfig,
) -> Result<SfmReconstruction> {
    config.validate()?;
    k.validate()?;
    check_images(images, k)?;
    if features.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature sets for {} images",
            features.len(),
            images.len()
        )));
    }
    let n = images.len();
    let all_unregistered = || Error::InitializationFailed {
        unregistered: (0..n).collect(),
    };
    let mut pairs = verify_pairs(features, k, config);
    if pairs.is_empty() {
        return Err(all_unregistered());
    }
    pairs.sort_by(|x, y| y.inliers.len().cmp(&x.inliers.len()).then((x.a, x.b).cmp(&(y.a, y.b))));
    let tracks = build_tracks(features, &pairs);
    log::debug!("{} verified pairs, {} tracks", pairs.len(), tracks.len());
    let mut b = Builder {
        features,
        k,
        config,
        points: vec![None; tracks.len()],
        rejected: vec![BTreeSet::new(); tracks.len()],
        tracks,
        poses: BTreeMap::new(),
        reference: 0,
        anchor: 1,
    };

    let mut bootstrapped = false;
    for pair in &pairs {
        match b.try_bootstrap(pair) {
            Ok(count) => {
                log::info!("initial pair ({}, {}) with {count} points", pair.a, pair.b);
                bootstrapped = true;
                break;
            }
            Err(err) => log::debug!("initial pair ({}, {}) rejected: {err}", pair.a, pair.b),
        }
    }
    if !bootstrapped {
        return Err(all_unregistered());
    }

    let mut failed: BTreeSet<usize> = BTreeSet::new();
    loop {
        let next = (0..n)
            .filter(|i| !b.poses.contains_key(i) && !failed.contains(i))
            .map(|i| (b.correspondences_2d3d(i).len(), i))
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
        let Some((count, img)) = next else { break };
        if count < config.min_registration_points {
            break;
        }
        let corr = b.correspondences_2d3d(img);
        let pts: Vec<Vector3<f64>> = corr.iter().map(|c| c.1).collect();
        let px: Vec<Vector2<f64>> = corr.iter().map(|c| c.2).collect();
        let est = solve_pnp_ransac(
            &pts,
            &px,
            k,
            config.ransac_iterations,
            config.pnp_threshold,
            pair_seed(config.seed, img, n),
        );
        let est = match est {
            Ok(e) if e.inlier_count() >= config.min_registration_points => e,
            Ok(e) => {
                log::debug!("image {img}: only {} PnP inliers", e.inlier_count());
                failed.insert(img);
                continue;
            }
            Err(err) => {
                log::debug!("image {img}: PnP failed: {err}");
                failed.insert(img);
                continue;
            }
        };
        b.poses.insert(img, est.pose);
        for ((t, _, _), ok) in corr.iter().zip(&est.inlier_mask) {
            if !ok {
                b.rejected[*t].insert(img);
            }
        }
        let added = b.triangulate_missing();
        log::info!(
            "registered image {img} with {} inliers, {added} new points",
            est.inlier_count()
        );
        b.adjust()?;
        failed.clear();
    }

    let (mut recon, _) = b.assemble();
    if recon.poses.len() < 2 {
        return Err(all_unregistered());
    }
    let reference = *recon.poses.keys().next().expect("non-empty");
    reanchor(&mut recon.poses, &mut recon.points, reference);
    recon.reference = reference;
    recon.scale_anchor = Some(b.anchor).filter(|&a| a != reference);
    recon.colors = recon
        .tracks
        .iter()
        .map(|track| {
            let mut sum = Vector3::zeros();
            let mut count = 0.0;
            for o in track {
                if let Some(c) = images[o.image].sample_bilinear(&o.pixel) {
                    sum += c;
                    count += 1.0;
                }
            }
            let c = if count > 0.0 { sum / count } else { Vector3::repeat(0.5) };
            [c.x, c.y, c.z]
        })
        .collect();
    let missing: Vec<usize> = (0..n).filter(|i| !recon.poses.contains_key(i)).collect();
    if !missing.is_empty() {
        log::warn!("images {missing:?} could not be registered");
    }
    Ok(recon)
}

/// Initial Gaussians: one isotropic splat per point with scale equal to
/// the mean distance to its three nearest neighbours.
pub fn seed_gaussians(recon: &SfmReconstruction, opacity: f64) -> Result<GaussianCloud> {
    let n = recon.points.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let gaussians = recon
        .points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = recon
                .points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, y)| (x - y).norm())
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            let m = d.len().min(3);
            let mut sigma = if m == 0 {
                1.0
            } else {
                d[..m].iter().sum::<f64>() / m as f64
            };
            if !(sigma > 1e-7) {
                sigma = 1e-7;
            }
            let c = recon.colors[i];
            GaussianPrimitive::isotropic(*x, sigma, opacity, Vector3::new(c[0], c[1], c[2]))
        })
        .collect();
    Ok(GaussianCloud::new(gaussians))
}
