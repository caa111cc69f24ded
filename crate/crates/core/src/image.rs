//! Floating-point RGB images.

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};

/// Row-major, interleaved RGB image with channels nominally in `[0, 1]`.
/// Pixel `(u, v)` has its centre at integer coordinates `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for v in 0..height {
            for u in 0..width {
                data.extend_from_slice(&f(u, v));
            }
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "buffer of {} values does not hold a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Bilinear interpolation of the four lattice neighbours. Returns `None`
    /// outside `[0, W-1] x [0, H-1]`.
    pub fn sample_bilinear(&self, pixel: &Vector2<f64>) -> Option<Vector3<f64>> {
        let (x0, y0, fx, fy) = self.cell(pixel)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p = |u: usize, v: usize| Vector3::from(self.get(u, v));
        Some(
            p(x0, y0) * ((1.0 - fx) * (1.0 - fy))
                + p(x1, y0) * (fx * (1.0 - fy))
                + p(x0, y1) * ((1.0 - fx) * fy)
                + p(x1, y1) * (fx * fy),
        )
    }

    fn cell(&self, pixel: &Vector2<f64>) -> Option<(usize, usize, f64, f64)> {
        let (x, y) = (pixel.x, pixel.y);
        if self.width == 0
            || self.height == 0
            || !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        Some((x0, y0, x - x0 as f64, y - y0 as f64))
    }

    /// Per-channel image gradient: central differences in the interior,
    /// one-sided differences on the border.
    pub fn gradient(&self) -> Result<ImageGradient> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::InvalidArgument(format!(
                "gradient needs at least a 3x3 image, got {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width, self.height);
        let mut du = ImageBuffer::new(w, h);
        let mut dv = ImageBuffer::new(w, h);
        for v in 0..h {
            for u in 0..w {
                let (ua, ub, su) = stencil(u, w);
                let (va, vb, sv) = stencil(v, h);
                let (a, b) = (self.get(ua, v), self.get(ub, v));
                let (c, d) = (self.get(u, va), self.get(u, vb));
                du.set(u, v, [(b[0] - a[0]) * su, (b[1] - a[1]) * su, (b[2] - a[2]) * su]);
                dv.set(u, v, [(d[0] - c[0]) * sv, (d[1] - c[1]) * sv, (d[2] - c[2]) * sv]);
            }
        }
        Ok(ImageGradient { du, dv })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ::image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// 8-bit RGB with values clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Saves as 8-bit; the format follows the file extension (png, ppm).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// Horizontal and vertical derivative maps of an [`ImageBuffer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGradient {
    pub du: ImageBuffer,
    pub dv: ImageBuffer,
}

impl ImageGradient {
    pub fn sample(&self, pixel: &Vector2<f64>) -> Option<(Vector3<f64>, Vector3<f64>)> {
        Some((self.du.sample_bilinear(pixel)?, self.dv.sample_bilinear(pixel)?))
    }
}
