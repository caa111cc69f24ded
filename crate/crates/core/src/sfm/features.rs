//! Difference-of-Gaussians keypoints with gradient-histogram descriptors,
//! and mutual nearest-neighbour matching.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const DESCRIPTOR_LEN: usize = 128;
const SCALES_PER_OCTAVE: usize = 3;
const BASE_SIGMA: f64 = 1.6;
const ASSUMED_BLUR: f64 = 0.5;
const CONTRAST_THRESHOLD: f64 = 0.04;
const EDGE_RATIO: f64 = 10.0;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f64 = 0.8;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE: f64 = 3.0;
const DESC_CLIP: f64 = 0.2;
pub const MIN_DETECT_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Pixel position in the input image.
    pub position: Vector2<f64>,
    /// Blob scale in pixels.
    pub scale: f64,
    pub orientation: f64,
    /// Unit-norm, non-negative descriptor.
    pub descriptor: Vec<f64>,
}

/// Single-channel float image used inside the scale space.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (4.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    acc += wgt * self.at(clamp(x as isize + k as isize - radius, self.w), y);
                }
                tmp[y * self.w + x] = acc;
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    acc += wgt * tmp[clamp(y as isize + k as isize - radius, self.h) * self.w + x];
                }
                out[y * self.w + x] = acc;
            }
        }
        Plane {
            w: self.w,
            h: self.h,
            data: out,
        }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, data }
    }

    fn sub(&self, other: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Central-difference gradient magnitude and angle at an interior pixel.
    fn gradient(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        if x == 0 || y == 0 || x + 1 >= self.w || y + 1 >= self.h {
            return None;
        }
        let dx = self.at(x + 1, y) - self.at(x - 1, y);
        let dy = self.at(x, y + 1) - self.at(x, y - 1);
        Some(((dx * dx + dy * dy).sqrt(), dy.atan2(dx)))
    }
}

struct Octave {
    gaussians: Vec<Plane>,
    dogs: Vec<Plane>,
}

fn build_scale_space(gray: Plane) -> Vec<Octave> {
    let s = SCALES_PER_OCTAVE;
    let min_dim = gray.w.min(gray.h);
    let n_octaves = ((min_dim as f64).log2().floor() as usize).saturating_sub(3).max(1);
    let sigmas: Vec<f64> = (0..s + 3)
        .map(|i| BASE_SIGMA * 2f64.powf(i as f64 / s as f64))
        .collect();
    let mut base = gray.blur((BASE_SIGMA * BASE_SIGMA - ASSUMED_BLUR * ASSUMED_BLUR).sqrt());
    let mut octaves = Vec::with_capacity(n_octaves);
    for _ in 0..n_octaves {
        let mut gaussians = vec![base.clone()];
        for i in 1..s + 3 {
            let inc = (sigmas[i] * sigmas[i] - sigmas[i - 1] * sigmas[i - 1]).sqrt();
            let next = gaussians[i - 1].blur(inc);
            gaussians.push(next);
        }
        let dogs = (0..s + 2).map(|i| gaussians[i + 1].sub(&gaussians[i])).collect();
        base = gaussians[s].downsample();
        octaves.push(Octave { gaussians, dogs });
        if base.w < 8 || base.h < 8 {
            break;
        }
    }
    octaves
}

fn is_extremum(dogs: &[Plane], i: usize, x: usize, y: usize) -> bool {
    let v = dogs[i].at(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for d in &dogs[i - 1..=i + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = d.at(xx, yy);
                if std::ptr::eq(d, &dogs[i]) && xx == x && yy == y {
                    continue;
                }
                if n >= v {
                    is_max = false;
                }
                if n <= v {
                    is_min = false;
                }
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

struct Extremum {
    x: f64,
    y: f64,
    layer: f64,
    ix: usize,
    iy: usize,
    il: usize,
}

/// Quadratic sub-pixel/sub-scale refinement with contrast and edge tests.
fn localize(dogs: &[Plane], mut i: usize, mut x: usize, mut y: usize) -> Option<Extremum> {
    let s = SCALES_PER_OCTAVE;
    let (w, h) = (dogs[0].w, dogs[0].h);
    for _ in 0..5 {
        let d = |l: usize, xx: usize, yy: usize| dogs[l].at(xx, yy);
        let g = Vector3::new(
            0.5 * (d(i, x + 1, y) - d(i, x - 1, y)),
            0.5 * (d(i, x, y + 1) - d(i, x, y - 1)),
            0.5 * (d(i + 1, x, y) - d(i - 1, x, y)),
        );
        let v2 = 2.0 * d(i, x, y);
        let dxx = d(i, x + 1, y) + d(i, x - 1, y) - v2;
        let dyy = d(i, x, y + 1) + d(i, x, y - 1) - v2;
        let dss = d(i + 1, x, y) + d(i - 1, x, y) - v2;
        let dxy = 0.25 * (d(i, x + 1, y + 1) - d(i, x - 1, y + 1) - d(i, x + 1, y - 1) + d(i, x - 1, y - 1));
        let dxs = 0.25 * (d(i + 1, x + 1, y) - d(i + 1, x - 1, y) - d(i - 1, x + 1, y) + d(i - 1, x - 1, y));
        let dys = 0.25 * (d(i + 1, x, y + 1) - d(i + 1, x, y - 1) - d(i - 1, x, y + 1) + d(i - 1, x, y - 1));
        let hm = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let off = -(hm.try_inverse()? * g);
        if off.iter().all(|o| o.abs() < 0.5) {
            let contrast = d(i, x, y) + 0.5 * g.dot(&off);
            if contrast.abs() * (s as f64) < CONTRAST_THRESHOLD {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            if det <= 0.0 || tr * tr * EDGE_RATIO >= (EDGE_RATIO + 1.0).powi(2) * det {
                return None;
            }
            return Some(Extremum {
                x: x as f64 + off.x,
                y: y as f64 + off.y,
                layer: i as f64 + off.z,
                ix: x,
                iy: y,
                il: i,
            });
        }
        let step = |p: usize, o: f64| (p as isize + o.round() as isize).max(0) as usize;
        x = step(x, off.x);
        y = step(y, off.y);
        i = step(i, off.z);
        if i < 1 || i > s || x < 1 || y < 1 || x + 1 >= w || y + 1 >= h {
            return None;
        }
    }
    None
}

fn dominant_orientations(img: &Plane, x: usize, y: usize, sigma: f64) -> Vec<f64> {
    let win_sigma = 1.5 * sigma;
    let radius = (3.0 * win_sigma).round() as isize;
    let mut hist = [0.0; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (x as isize + dx, y as isize + dy);
            if px < 0 || py < 0 {
                continue;
            }
            let Some((mag, ang)) = img.gradient(px as usize, py as usize) else {
                continue;
            };
            let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * win_sigma * win_sigma)).exp();
            let bin = ((ang + PI) / (2.0 * PI) * ORI_BINS as f64).floor() as isize;
            hist[bin.rem_euclid(ORI_BINS as isize) as usize] += wgt * mag;
        }
    }
    for _ in 0..2 {
        let prev = hist;
        for b in 0..ORI_BINS {
            hist[b] = 0.25 * prev[(b + ORI_BINS - 1) % ORI_BINS] + 0.5 * prev[b] + 0.25 * prev[(b + 1) % ORI_BINS];
        }
    }
    let max = hist.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for b in 0..ORI_BINS {
        let l = hist[(b + ORI_BINS - 1) % ORI_BINS];
        let r = hist[(b + 1) % ORI_BINS];
        let c = hist[b];
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let ang = (b as f64 + 0.5 + shift) / ORI_BINS as f64 * 2.0 * PI - PI;
            out.push(ang);
        }
    }
    out
}

fn descriptor(img: &Plane, x: f64, y: f64, sigma: f64, orientation: f64) -> Option<Vec<f64>> {
    let d = DESC_WIDTH as f64;
    let hist_width = DESC_SCALE * sigma;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize;
    let (cos_t, sin_t) = (orientation.cos(), orientation.sin());
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = vec![0.0; DESCRIPTOR_LEN];
    let mut any = false;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px < 0 || py < 0 {
                continue;
            }
            let Some((mag, ang)) = img.gradient(px as usize, py as usize) else {
                continue;
            };
            let (ox, oy) = (px as f64 - x, py as f64 - y);
            let rx = (cos_t * ox + sin_t * oy) / hist_width;
            let ry = (-sin_t * ox + cos_t * oy) / hist_width;
            let rbin = ry + 0.5 * d - 0.5;
            let cbin = rx + 0.5 * d - 0.5;
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            let mut rel = (ang - orientation).rem_euclid(2.0 * PI);
            if rel >= 2.0 * PI {
                rel = 0.0;
            }
            let obin = rel / (2.0 * PI) * DESC_BINS as f64;
            let wgt = (-(rx * rx + ry * ry) / (2.0 * (0.5 * d) * (0.5 * d))).exp() * mag;
            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            for (ri, wr) in [(r0 as isize, 1.0 - fr), (r0 as isize + 1, fr)] {
                if ri < 0 || ri >= DESC_WIDTH as isize {
                    continue;
                }
                for (ci, wc) in [(c0 as isize, 1.0 - fc), (c0 as isize + 1, fc)] {
                    if ci < 0 || ci >= DESC_WIDTH as isize {
                        continue;
                    }
                    for (oi, wo) in [(o0 as usize % DESC_BINS, 1.0 - fo), ((o0 as usize + 1) % DESC_BINS, fo)] {
                        let idx = (ri as usize * DESC_WIDTH + ci as usize) * DESC_BINS + oi;
                        hist[idx] += wgt * wr * wc * wo;
                        any = true;
                    }
                }
            }
        }
    }
    if !any {
        return None;
    }
    normalize(&mut hist)?;
    hist.iter_mut().for_each(|v| *v = v.min(DESC_CLIP));
    normalize(&mut hist)?;
    Some(hist)
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(())
}

/// Scale-space keypoints of `image`. Deterministic for identical input.
pub fn detect_features(image: &ImageBuffer) -> Result<Vec<Keypoint>> {
    let (w, h) = image.dimensions();
    if w < MIN_DETECT_SIZE || h < MIN_DETECT_SIZE {
        return Err(Error::InvalidArgument(format!(
            "feature detection needs at least {MIN_DETECT_SIZE}x{MIN_DETECT_SIZE} pixels, got {w}x{h}"
        )));
    }
    let gray = Plane {
        w,
        h,
        data: image.to_gray(),
    };
    let octaves = build_scale_space(gray);
    let s = SCALES_PER_OCTAVE;
    let prefilter = 0.5 * CONTRAST_THRESHOLD / s as f64;
    let mut keypoints = Vec::new();
    for (o, oct) in octaves.iter().enumerate() {
        let factor = (1usize << o) as f64;
        let (ow, oh) = (oct.dogs[0].w, oct.dogs[0].h);
        for i in 1..=s {
            for y in 1..oh - 1 {
                for x in 1..ow - 1 {
                    if oct.dogs[i].at(x, y).abs() <= prefilter || !is_extremum(&oct.dogs, i, x, y) {
                        continue;
                    }
                    let Some(ext) = localize(&oct.dogs, i, x, y) else {
                        continue;
                    };
                    let sigma_oct = BASE_SIGMA * 2f64.powf(ext.layer / s as f64);
                    let gimg = &oct.gaussians[ext.il];
                    let position = Vector2::new(ext.x * factor, ext.y * factor);
                    if position.x < 0.0
                        || position.y < 0.0
                        || position.x > (w - 1) as f64
                        || position.y > (h - 1) as f64
                    {
                        continue;
                    }
                    for ori in dominant_orientations(gimg, ext.ix, ext.iy, sigma_oct) {
                        if let Some(desc) = descriptor(gimg, ext.x, ext.y, sigma_oct, ori) {
                            keypoints.push(Keypoint {
                                position,
                                scale: sigma_oct * factor,
                                orientation: ori,
                                descriptor: desc,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(keypoints)
}

/// Putative correspondences between two keypoint sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchPair {
    pub image_a: usize,
    pub image_b: usize,
    /// `(index in a, index in b)`.
    pub correspondences: Vec<(usize, usize)>,
    pub inlier_mask: Vec<bool>,
}

impl MatchPair {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&m| m).count()
    }

    pub fn inliers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.correspondences
            .iter()
            .zip(&self.inlier_mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Two nearest neighbours `(index, d1^2, d2^2)` of `query` in `set`.
fn two_nearest(query: &[f64], set: &[Keypoint]) -> Option<(usize, f64, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, k) in set.iter().enumerate() {
        let d = squared_distance(query, &k.descriptor);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// Mutual nearest neighbours that also pass the distance-ratio test in the
/// `a -> b` direction. Image indices are left at `(0, 1)`.
pub fn match_features(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> MatchPair {
    let forward: Vec<Option<(usize, f64, f64)>> = a.iter().map(|k| two_nearest(&k.descriptor, b)).collect();
    let backward: Vec<Option<usize>> = b.iter().map(|k| two_nearest(&k.descriptor, a).map(|t| t.0)).collect();
    let r2 = ratio * ratio;
    let correspondences: Vec<(usize, usize)> = forward
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let (j, d1, d2) = (*f)?;
            let passes = d2.is_infinite() || d1 < r2 * d2;
            (passes && backward[j] == Some(i)).then_some((i, j))
        })
        .collect();
    MatchPair {
        image_a: 0,
        image_b: 1,
        inlier_mask: vec![true; correspondences.len()],
        correspondences,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_keypoints(n: usize, seed: u64) -> Vec<Keypoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut d: Vec<f64> = (0..DESCRIPTOR_LEN).map(|_| rng.random::<f64>()).collect();
                normalize(&mut d).unwrap();
                Keypoint {
                    position: Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)),
                    scale: 2.0,
                    orientation: 0.0,
                    descriptor: d,
                }
            })
            .collect()
    }

    #[test]
    fn uniform_image_has_no_keypoints() {
        let img = ImageBuffer::filled(64, 64, [0.5; 3]);
        assert!(detect_features(&img).unwrap().is_empty());
    }

    #[test]
    fn rejects_small_images() {
        assert!(detect_features(&ImageBuffer::new(31, 64)).is_err());
    }

    #[test]
    fn finds_single_blob() {
        let (cx, cy) = (30.3, 33.6);
        let img = ImageBuffer::from_fn(64, 64, |u, v| {
            let d2 = (u as f64 - cx).powi(2) + (v as f64 - cy).powi(2);
            [(-d2 / (2.0 * 25.0)).exp(); 3]
        });
        let kps = detect_features(&img).unwrap();
        assert!(!kps.is_empty());
        let best = kps
            .iter()
            .map(|k| (k.position - Vector2::new(cx, cy)).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 2.0, "closest keypoint {best} px away");
        for k in &kps {
            let n: f64 = k.descriptor.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(k.descriptor.iter().all(|&x| x >= 0.0));
        }
    }

    fn textured(seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..40)
            .map(|_| {
                (
                    rng.random_range(8.0..88.0),
                    rng.random_range(8.0..88.0),
                    rng.random_range(1.5..4.0),
                    [rng.random(), rng.random(), rng.random()],
                )
            })
            .collect();
        ImageBuffer::from_fn(96, 96, |u, v| {
            let mut c = [0.1; 3];
            for (x, y, s, col) in &blobs {
                let g = (-((u as f64 - x).powi(2) + (v as f64 - y).powi(2)) / (2.0 * s * s)).exp();
                for k in 0..3 {
                    c[k] += 0.8 * g * col[k];
                }
            }
            c
        })
    }

    #[test]
    fn descriptors_survive_quarter_turn() {
        let img = textured(3);
        let n = img.width();
        let rot = ImageBuffer::from_fn(n, n, |u, v| img.get(v, n - 1 - u));
        let a = detect_features(&img).unwrap();
        let b = detect_features(&rot).unwrap();
        assert!(a.len() > 10);
        let mut good = 0;
        for k in &a {
            // (x, y) in the original lands at (n - 1 - y, x) in the rotated copy.
            let p = Vector2::new(n as f64 - 1.0 - k.position.y, k.position.x);
            let close = b
                .iter()
                .filter(|q| (q.position - p).norm() < 1.0)
                .map(|q| squared_distance(&k.descriptor, &q.descriptor).sqrt())
                .fold(f64::INFINITY, f64::min);
            if close < 0.4 {
                good += 1;
            }
        }
        assert!(good * 2 >= a.len(), "{good} of {} descriptors matched", a.len());
    }

    #[test]
    fn detection_is_deterministic() {
        let img = textured(5);
        assert_eq!(detect_features(&img).unwrap(), detect_features(&img).unwrap());
    }

    #[test]
    fn self_match_is_identity() {
        let kps = random_keypoints(50, 1);
        let m = match_features(&kps, &kps, 0.8);
        assert_eq!(m.correspondences.len(), 50);
        assert!(m.correspondences.iter().all(|(i, j)| i == j));
        assert_eq!(m.inlier_mask, vec![true; 50]);
    }

    #[test]
    fn random_descriptors_rarely_match() {
        let a = random_keypoints(200, 2);
        let b = random_keypoints(200, 3);
        let m = match_features(&a, &b, 0.8);
        assert!(
            m.correspondences.len() < 10,
            "{} spurious matches",
            m.correspondences.len()
        );
    }
}
