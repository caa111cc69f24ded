//! Joint reconstruction of a 3D Gaussian scene and per-image camera poses
//! from unposed images.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: Euler-angle poses, pinhole projection and the analytic
//!   pose Jacobians.
//! * [`image`]: floating-point RGB buffers with bilinear sampling and
//!   gradient maps.
//! * [`render`]: a CPU splat rasterizer with a hand-written backward pass.
//! * [`lk3d`]: Gauss-Newton photometric pose refinement against Gaussian
//!   colors.
//! * [`sfm`]: feature detection, two-view bootstrap, PnP registration,
//!   triangulation and bundle adjustment used to seed the optimisation.
//! * [`train`]: the alternating Gaussian / pose optimisation schedule.
//! * [`metrics`]: PSNR, SSIM, Umeyama alignment, ATE and RPE.
//! * [`io`], [`synthetic`] and [`pipeline`]: file formats, verification
//!   scenes and the batch driver used by the command line tool.

pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod lk3d;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod sfm;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, CameraPose, EulerAngles, ProjectionResult};
pub use image::ImageBuffer;
pub use render::{GaussianCloud, GaussianPrimitive, RenderOutput};
