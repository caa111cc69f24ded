//! Seeded synthetic scenes with known geometry, used to verify the
//! reconstruction stages end to end.
//!
//! The scene is a textured relief surface `z = h(x, y)` over `[-1, 1]^2`
//! covered by overlapping, nearly opaque isotropic Gaussians. Cameras sit on
//! a horizontal arc in front of the surface and look at its centroid.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::ImageBuffer;
use crate::render::{render, GaussianCloud, GaussianPrimitive};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub gaussian_count: usize,
    pub width: usize,
    pub height: usize,
    pub view_count: usize,
    /// Distance from the cameras to the scene centroid.
    pub orbit_radius: f64,
    /// Total azimuth span of the camera arc, degrees.
    pub orbit_arc_deg: f64,
    /// Camera elevation above the surface's mid-plane, degrees.
    pub elevation_deg: f64,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    /// Spatial frequency multiplier of the color field.
    pub texture_frequency: f64,
    /// Amplitude of per-Gaussian random color jitter.
    pub noise_level: f64,
    /// Height of the surface relief.
    pub relief: f64,
    pub opacity: f64,
    /// Gaussian standard deviation as a fraction of the mean spacing.
    pub footprint: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            gaussian_count: 600,
            width: 64,
            height: 64,
            view_count: 8,
            orbit_radius: 3.2,
            orbit_arc_deg: 40.0,
            elevation_deg: 10.0,
            fov_deg: 45.0,
            texture_frequency: 1.0,
            noise_level: 0.0,
            relief: 0.35,
            opacity: 0.95,
            footprint: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gaussian_count == 0 || self.view_count == 0 || self.width < 3 || self.height < 3 {
            return Err(Error::Config(
                "synthetic scene needs at least one Gaussian, one view and a 3x3 image".into(),
            ));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.orbit_radius > 0.0) {
            return Err(Error::Config(
                "synthetic field of view or orbit radius out of range".into(),
            ));
        }
        if !(self.footprint > 0.0) {
            return Err(Error::Config("synthetic footprint must be positive".into()));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::Config("synthetic opacity must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Parses a comma separated `key=value` list, e.g.
    /// `views=12,size=64,gaussians=600,seed=3`. Unlisted keys keep their
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in synthetic spec, got `{item}`")))?;
            let num = |v: &str| -> Result<f64> {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid number `{v}` for synthetic key `{key}`")))
            };
            let int = |v: &str| -> Result<usize> {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("invalid integer `{v}` for synthetic key `{key}`")))
            };
            match key.trim() {
                "gaussians" => spec.gaussian_count = int(value)?,
                "size" => {
                    spec.width = int(value)?;
                    spec.height = spec.width;
                }
                "width" => spec.width = int(value)?,
                "height" => spec.height = int(value)?,
                "views" => spec.view_count = int(value)?,
                "radius" => spec.orbit_radius = num(value)?,
                "arc" => spec.orbit_arc_deg = num(value)?,
                "elevation" => spec.elevation_deg = num(value)?,
                "fov" => spec.fov_deg = num(value)?,
                "texture" => spec.texture_frequency = num(value)?,
                "noise" => spec.noise_level = num(value)?,
                "relief" => spec.relief = num(value)?,
                "opacity" => spec.opacity = num(value)?,
                "footprint" => spec.footprint = num(value)?,
                "seed" => {
                    spec.seed = value
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid seed `{value}`")))?
                }
                other => return Err(Error::Config(format!("unknown synthetic key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * (self.width as f64 - 1.0),
            cy: 0.5 * (self.height as f64 - 1.0),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: GaussianCloud,
    pub poses: Vec<CameraPose>,
    pub images: Vec<ImageBuffer>,
    pub intrinsics: CameraIntrinsics,
    /// The continuous surface the Gaussians were sampled from.
    pub surface: ReliefSurface,
}

/// Textured height field `z = h(x, y)`, expressed in the scene frame
/// (shifted by `-offset` like the cloud). Unlike the cloud, which samples
/// `[-1, 1]^2`, the surface continues indefinitely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliefSurface {
    pub relief: f64,
    pub texture_frequency: f64,
    pub offset: Vector3<f64>,
}

impl ReliefSurface {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        surface_height(x, y, self.relief)
    }

    /// Color of the surface point above scene-frame `(x, y)`.
    pub fn color_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        texture_color(&(p + self.offset), self.texture_frequency)
    }

    /// First intersection of the camera ray through `pixel` with the
    /// surface, in the scene frame.
    pub fn intersect(
        &self,
        pose: &CameraPose,
        k: &CameraIntrinsics,
        pixel: &nalgebra::Vector2<f64>,
    ) -> Option<Vector3<f64>> {
        let r = pose.rotation_matrix();
        let origin = pose.center() + self.offset;
        let dir = (r.transpose() * k.unproject(pixel)).normalize();
        let above = |t: f64| {
            let p = origin + dir * t;
            p.z - surface_height(p.x, p.y, self.relief)
        };
        if above(0.0) <= 0.0 {
            return None;
        }
        let far = 4.0 * origin.norm() + 4.0;
        let step = 0.005;
        let mut t0 = 0.0;
        while t0 < far {
            let t1 = t0 + step;
            if above(t1) <= 0.0 {
                let (mut lo, mut hi) = (t0, t1);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if above(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let p = origin + dir * (0.5 * (lo + hi));
                return Some(p - self.offset);
            }
            t0 = t1;
        }
        None
    }

    /// Ray-cast image of the textured surface over a black background.
    pub fn render(&self, pose: &CameraPose, k: &CameraIntrinsics) -> ImageBuffer {
        ImageBuffer::from_fn(k.width, k.height, |u, v| {
            match self.intersect(pose, k, &nalgebra::Vector2::new(u as f64, v as f64)) {
                Some(p) => {
                    let c = self.color_at(&p);
                    [c.x, c.y, c.z]
                }
                None => [0.0; 3],
            }
        })
    }
}

fn radical_inverse_base2(mut i: u32) -> f64 {
    i = i.reverse_bits();
    i as f64 / 4_294_967_296.0
}

fn surface_height(x: f64, y: f64, relief: f64) -> f64 {
    relief * (0.6 * (1.9 * x + 0.4).sin() * (1.5 * y - 0.3).cos() + 0.4 * (2.7 * x * y + 0.8 * y).sin())
}

/// Smooth color field with a few incommensurate frequencies per channel.
pub fn texture_color(p: &Vector3<f64>, frequency: f64) -> Vector3<f64> {
    let f = frequency;
    let r = 0.5 + 0.28 * (f * (3.1 * p.x + 1.3 * p.y) + 0.2).sin() + 0.14 * (f * (5.3 * p.y - 2.1 * p.z)).cos();
    let g = 0.5 + 0.28 * (f * (2.3 * p.y - 1.7 * p.x) + 0.4).sin() + 0.14 * (f * (4.7 * p.x + 3.3 * p.z) + 1.1).sin();
    let b = 0.5 + 0.28 * (f * (2.9 * p.z + 2.2 * p.x) + 1.0).cos() + 0.14 * (f * (4.1 * (p.x - p.y)) + 0.5).cos();
    Vector3::new(r, g, b)
}

/// Cloud, ground-truth camera poses and renders for `spec`. The cloud is
/// centred on the origin; pose `i` is the `i`-th camera along the arc.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.gaussian_count;
    let spacing = 2.0 / (n as f64).sqrt();
    let sigma = spec.footprint * spacing;
    let offset = rng.random_range(0.0..1.0);
    let mut gaussians = Vec::with_capacity(n);
    for i in 0..n {
        // Jittered Hammersley samples cover the square evenly for any count.
        let u = ((i as f64 + 0.5) / n as f64 + offset).fract();
        let v = radical_inverse_base2(i as u32);
        let x = -1.0 + 2.0 * u + rng.random_range(-0.25..0.25) * spacing;
        let y = -1.0 + 2.0 * v + rng.random_range(-0.25..0.25) * spacing;
        let p = Vector3::new(x, y, surface_height(x, y, spec.relief));
        let jitter = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * spec.noise_level;
        let color = (texture_color(&p, spec.texture_frequency) + jitter).map(|c| c.clamp(0.0, 1.0));
        gaussians.push(GaussianPrimitive::isotropic(p, sigma, spec.opacity, color));
    }
    let mut cloud = GaussianCloud::new(gaussians);
    let centroid = cloud.centroid();
    for g in &mut cloud.gaussians {
        g.position -= centroid;
    }

    let elevation = spec.elevation_deg.to_radians();
    let poses = (0..spec.view_count)
        .map(|i| {
            let t = if spec.view_count == 1 {
                0.5
            } else {
                i as f64 / (spec.view_count - 1) as f64
            };
            let az = (t - 0.5) * spec.orbit_arc_deg.to_radians();
            // Surface normal is +z; the arc sweeps around the y axis.
            let eye = spec.orbit_radius
                * Vector3::new(az.sin() * elevation.cos(), elevation.sin(), az.cos() * elevation.cos());
            CameraPose::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, -1.0, 0.0))
        })
        .collect::<Vec<_>>();
    let intrinsics = spec.intrinsics();
    let images = poses.iter().map(|p| render(&cloud, p, &intrinsics).image).collect();
    Ok(SyntheticScene {
        cloud,
        poses,
        images,
        intrinsics,
        surface: ReliefSurface {
            relief: spec.relief,
            texture_frequency: spec.texture_frequency,
            offset: centroid,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            gaussian_count: 150,
            width: 32,
            height: 32,
            view_count: 3,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_scene(&small()).unwrap();
        let b = generate_synthetic_scene(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&SyntheticSceneSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn single_view_is_valid() {
        let s = generate_synthetic_scene(&SyntheticSceneSpec {
            view_count: 1,
            ..small()
        })
        .unwrap();
        assert_eq!(s.poses.len(), 1);
        assert_eq!(s.images.len(), 1);
    }

    #[test]
    fn images_are_renders_of_the_cloud() {
        let s = generate_synthetic_scene(&small()).unwrap();
        for (p, img) in s.poses.iter().zip(&s.images) {
            assert_eq!(&render(&s.cloud, p, &s.intrinsics).image, img);
        }
    }

    #[test]
    fn views_are_well_covered() {
        let s = generate_synthetic_scene(&SyntheticSceneSpec {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        for img in &s.images {
            let lit = img.data().chunks(3).filter(|p| p.iter().sum::<f64>() > 0.3).count();
            assert!(lit as f64 > 0.5 * (64 * 64) as f64, "only {lit} lit pixels");
        }
        for p in &s.poses {
            assert!(p.transform(&Vector3::zeros()).z > 0.0);
        }
    }

    #[test]
    fn parse_spec_string() {
        let s = SyntheticSceneSpec::parse("views=12, size=48,seed=5,noise=0.1").unwrap();
        assert_eq!((s.view_count, s.width, s.height, s.seed), (12, 48, 48, 5));
        assert_eq!(s.noise_level, 0.1);
        assert!(SyntheticSceneSpec::parse("bogus=1").is_err());
        assert!(SyntheticSceneSpec::parse("views").is_err());
        assert!(SyntheticSceneSpec::parse("views=0").is_err());
    }
}
