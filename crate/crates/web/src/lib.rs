//! Browser demo around the core crate: pick a view of a synthetic splat
//! scene, knock the camera off its pose and watch the photometric
//! refinement pull it back.

use splatpose::geometry::rotation_angle_between;
use splatpose::lk3d::{refine_pose, ColorTarget, LkConfig};
use splatpose::metrics::compute_psnr;
use splatpose::render::render;
use splatpose::synthetic::{generate_synthetic_scene, SyntheticScene, SyntheticSceneSpec};
use splatpose::{CameraPose, ImageBuffer};
use wasm_bindgen::prelude::*;

use nalgebra::{Vector3, Vector6};

/// Packs a float image into 8-bit RGBA for a canvas `ImageData`.
pub fn to_rgba(image: &ImageBuffer) -> Vec<u8> {
    image
        .data()
        .chunks_exact(3)
        .flat_map(|c| {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(c[0]), q(c[1]), q(c[2]), 255]
        })
        .collect()
}

fn orbit_pose(radius: f64, azimuth_deg: f64, elevation_deg: f64) -> CameraPose {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = radius * Vector3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos());
    CameraPose::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, -1.0, 0.0))
}

#[wasm_bindgen]
pub struct Demo {
    scene: SyntheticScene,
    radius: f64,
    target_pose: CameraPose,
    target: ImageBuffer,
    estimate: CameraPose,
    kicks: u64,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize) -> Result<Demo, JsError> {
        let spec = SyntheticSceneSpec {
            seed,
            width: size,
            height: size,
            view_count: 1,
            ..SyntheticSceneSpec::default()
        };
        let scene = generate_synthetic_scene(&spec).map_err(|e| JsError::new(&e.to_string()))?;
        let target_pose = scene.poses[0];
        let target = scene.images[0].clone();
        Ok(Demo {
            radius: spec.orbit_radius,
            scene,
            target_pose,
            target,
            estimate: target_pose,
            kicks: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.scene.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.scene.intrinsics.height
    }

    /// Moves the reference camera on its orbit; the estimate is reset to it.
    /// Returns the RGBA render.
    pub fn set_view(&mut self, azimuth_deg: f64, elevation_deg: f64) -> Vec<u8> {
        self.target_pose = orbit_pose(self.radius, azimuth_deg, elevation_deg);
        self.target = render(&self.scene.cloud, &self.target_pose, &self.scene.intrinsics).image;
        self.estimate = self.target_pose;
        to_rgba(&self.target)
    }

    /// Rotates the estimate by `rotation_deg` about each axis (random signs)
    /// and shifts it by `translation` scene units in a random direction.
    pub fn perturb(&mut self, rotation_deg: f64, translation: f64) -> Vec<u8> {
        self.kicks += 1;
        // Small deterministic sequence; enough variety for a demo.
        let mut h = self.kicks.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut next = || {
            h ^= h >> 29;
            h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
            (h >> 11) as f64 / (1u64 << 53) as f64
        };
        let sign = |x: f64| if x < 0.5 { -1.0 } else { 1.0 };
        let d = rotation_deg.to_radians();
        let (a, b, c) = (sign(next()), sign(next()), sign(next()));
        let dir = Vector3::new(next() - 0.5, next() - 0.5, next() - 0.5).normalize() * translation;
        self.estimate = self
            .target_pose
            .apply_increment(&Vector6::new(a * d, b * d, c * d, dir.x, dir.y, dir.z), 1.0);
        self.estimate_rgba()
    }

    /// Refines the estimate against the reference view. Each round
    /// re-samples the Gaussian colors from the current render.
    pub fn refine(&mut self, rounds: usize, max_iterations: usize) -> Result<RefineStats, JsError> {
        let config = LkConfig {
            max_iterations,
            color_target: ColorTarget::Rendered,
            ..LkConfig::default()
        };
        let mut stats = RefineStats {
            iterations: 0,
            initial_cost: f64::NAN,
            final_cost: f64::NAN,
        };
        for round in 0..rounds {
            let (pose, diag) = refine_pose(
                &self.scene.cloud,
                &self.estimate,
                &self.scene.intrinsics,
                &self.target,
                &config,
            )
            .map_err(|e| JsError::new(&e.to_string()))?;
            self.estimate = pose;
            stats.iterations += diag.iterations;
            if round == 0 {
                stats.initial_cost = diag.cost_trace.first().copied().unwrap_or(f64::NAN);
            }
            stats.final_cost = diag.cost_trace.last().copied().unwrap_or(f64::NAN);
        }
        Ok(stats)
    }

    pub fn estimate_rgba(&self) -> Vec<u8> {
        to_rgba(&self.estimate_image())
    }

    /// Angle between the estimated and reference camera rotations.
    pub fn rotation_error_deg(&self) -> f64 {
        rotation_angle_between(&self.estimate.rotation_matrix(), &self.target_pose.rotation_matrix()).to_degrees()
    }

    pub fn center_error(&self) -> f64 {
        (self.estimate.center() - self.target_pose.center()).norm()
    }

    /// PSNR of the estimate's render against the reference view.
    pub fn psnr(&self) -> f64 {
        compute_psnr(&self.estimate_image(), &self.target).unwrap_or(f64::NAN)
    }
}

impl Demo {
    fn estimate_image(&self) -> ImageBuffer {
        render(&self.scene.cloud, &self.estimate, &self.scene.intrinsics).image
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct RefineStats {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}
