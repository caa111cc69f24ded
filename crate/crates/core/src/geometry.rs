//! Pose parameterisation and pinhole projection.
//!
//! A [`CameraPose`] maps world points into the camera frame as
//! `p_c = R x + s`, with `R = R_z(gamma) R_y(beta) R_x(alpha)`. Every
//! six-vector pose increment in the crate uses the column order
//! `(alpha, beta, gamma, s_x, s_y, s_z)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{
    Isometry3, Matrix2x3, Matrix3, Rotation3, SMatrix, Translation3, UnitQuaternion, Vector2, Vector3, Vector6,
};

use crate::error::{Error, Result};

/// Perspective divides closer than this to the image plane are rejected.
pub const DEPTH_EPSILON: f64 = 1e-8;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Rotation angles in radians about the x (pitch), y (yaw) and z (roll) axes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerAngles {
    pub const ZERO: EulerAngles = EulerAngles {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }

    /// Rotation matrix without the finiteness check of [`euler_to_rotation`].
    pub fn to_matrix(&self) -> Matrix3<f64> {
        rot_z(self.gamma) * rot_y(self.beta) * rot_x(self.alpha)
    }

    /// Recovers the angles of `R = R_z R_y R_x`. At gimbal lock the roll is
    /// folded into `alpha` and `gamma` is set to zero.
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let sb = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let beta = sb.asin();
        let cb = (r[(2, 1)].powi(2) + r[(2, 2)].powi(2)).sqrt();
        if cb > 1e-12 {
            EulerAngles {
                alpha: r[(2, 1)].atan2(r[(2, 2)]),
                beta: sb.atan2(cb),
                gamma: r[(1, 0)].atan2(r[(0, 0)]),
            }
        } else {
            // cos(beta) = 0: only alpha - gamma (or alpha + gamma) is observable.
            let alpha = if sb > 0.0 {
                r[(0, 1)].atan2(r[(1, 1)])
            } else {
                (-r[(0, 1)]).atan2(r[(1, 1)])
            };
            EulerAngles {
                alpha,
                beta,
                gamma: 0.0,
            }
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.alpha, self.beta, self.gamma)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(g: f64) -> Matrix3<f64> {
    let (s, c) = g.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(g: f64) -> Matrix3<f64> {
    let (s, c) = g.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn check_angles(angles: &EulerAngles) -> Result<()> {
    if angles.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite Euler angles {angles:?}")))
    }
}

/// `R_z(gamma) R_y(beta) R_x(alpha)`.
pub fn euler_to_rotation(angles: &EulerAngles) -> Result<Matrix3<f64>> {
    check_angles(angles)?;
    Ok(angles.to_matrix())
}

/// Partial derivatives of the rotation matrix with respect to
/// `(alpha, beta, gamma)`, each obtained by differentiating one factor of
/// the product.
pub fn rotation_jacobians(angles: &EulerAngles) -> Result<[Matrix3<f64>; 3]> {
    check_angles(angles)?;
    Ok(rotation_jacobians_unchecked(angles))
}

pub(crate) fn rotation_jacobians_unchecked(angles: &EulerAngles) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(angles.alpha), rot_y(angles.beta), rot_z(angles.gamma));
    [
        rz * ry * d_rot_x(angles.alpha),
        rz * d_rot_y(angles.beta) * rx,
        d_rot_z(angles.gamma) * ry * rx,
    ]
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    a - TAU * ((a - PI) / TAU).ceil()
}

pub fn canonicalize(angles: &EulerAngles) -> EulerAngles {
    EulerAngles {
        alpha: wrap_angle(angles.alpha),
        beta: wrap_angle(angles.beta),
        gamma: wrap_angle(angles.gamma),
    }
}

/// Pinhole intrinsics shared by every view of a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalised image coordinates `K^-1 [u v 1]^T` (z = 1).
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= (self.width - 1) as f64 && pixel.y <= (self.height - 1) as f64
    }
}

/// World-to-camera extrinsics `[R | s]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CameraPose {
    pub rotation: EulerAngles,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: EulerAngles, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_rotation_translation(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: EulerAngles::from_matrix(r),
            translation: t,
        }
    }

    /// Pose of a camera at `eye` looking at `target`, with image rows
    /// pointing along `-up` (y down, z forward).
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::from_rotation_translation(&r, -(r * eye))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x + self.translation
    }

    /// Camera centre in world coordinates, `-R^T s`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation_matrix()));
        Isometry3::from_parts(Translation3::from(self.translation), rot)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let r = iso.rotation.to_rotation_matrix().into_inner();
        Self::from_rotation_translation(&r, iso.translation.vector)
    }

    /// Adds `eta * delta` to `(alpha, beta, gamma, s_x, s_y, s_z)`.
    pub fn apply_increment(&self, delta: &Vector6<f64>, eta: f64) -> Self {
        CameraPose {
            rotation: EulerAngles {
                alpha: self.rotation.alpha + eta * delta[0],
                beta: self.rotation.beta + eta * delta[1],
                gamma: self.rotation.gamma + eta * delta[2],
            },
            translation: self.translation + eta * Vector3::new(delta[3], delta[4], delta[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rotation.alpha,
            self.rotation.beta,
            self.rotation.gamma,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        CameraPose {
            rotation: EulerAngles::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }
}

/// Angle in radians of the relative rotation `R_a R_b^T`.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a * b.transpose();
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part there.
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    (0.5 * skew.norm()).atan2(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionResult {
    pub pixel: Vector2<f64>,
    /// Camera-frame z. May be negative; callers filter on `depth > 0`.
    pub depth: f64,
}

pub fn project(point: &Vector3<f64>, pose: &CameraPose, intrinsics: &CameraIntrinsics) -> Result<ProjectionResult> {
    if !point.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite point {point:?}")));
    }
    let pc = pose.transform(point);
    project_camera_point(&pc, intrinsics)
}

pub(crate) fn project_camera_point(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Result<ProjectionResult> {
    if pc.z.abs() < DEPTH_EPSILON {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(ProjectionResult {
        pixel: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        depth: pc.z,
    })
}

/// Derivative of the pixel with respect to the camera-frame point.
pub(crate) fn perspective_jacobian(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz2, 0.0, k.fy * iz, -k.fy * pc.y * iz2)
}

/// Derivative of the projected pixel with respect to the six pose
/// parameters `(alpha, beta, gamma, s_x, s_y, s_z)`.
pub fn projection_jacobian(
    point: &Vector3<f64>,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
) -> Result<Matrix2x6> {
    let pc = pose.transform(point);
    if pc.z < DEPTH_EPSILON {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(projection_jacobian_at(point, &pc, pose, intrinsics))
}

pub(crate) fn projection_jacobian_at(
    point: &Vector3<f64>,
    pc: &Vector3<f64>,
    pose: &CameraPose,
    k: &CameraIntrinsics,
) -> Matrix2x6 {
    let jp = perspective_jacobian(pc, k);
    let dr = rotation_jacobians_unchecked(&pose.rotation);
    let mut j = Matrix2x6::zeros();
    for (col, d) in dr.iter().enumerate() {
        j.set_column(col, &(jp * (d * point)));
    }
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
    j
}
