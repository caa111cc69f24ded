//! On-disk formats: datasets, intrinsics, trajectories, PLY clouds,
//! flat `key = value` files, CSV tables and SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::ImageBuffer;
use crate::render::{GaussianCloud, GaussianPrimitive};

pub const INTRINSICS_FILE: &str = "intrinsics.txt";
/// Optional reference trajectory inside a dataset directory, one pose per image.
pub const REFERENCE_FILE: &str = "reference.txt";

/// Fraction of images used for training, e.g. `7/8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub numerator: usize,
    pub denominator: usize,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            numerator: 7,
            denominator: 8,
        }
    }
}

impl SplitRatio {
    pub fn new(numerator: usize, denominator: usize) -> Result<Self> {
        if denominator == 0 || numerator == 0 || numerator > denominator {
            return Err(Error::Config(format!("invalid split ratio {numerator}/{denominator}")));
        }
        Ok(Self { numerator, denominator })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (a, b) = text
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("split ratio must look like 7/8, got `{text}`")))?;
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("split ratio must look like 7/8, got `{text}`")))
        };
        Self::new(num(a)?, num(b)?)
    }

    /// Train and test indices for `n` images. Within every block of
    /// `denominator` images the first `denominator - numerator` are held
    /// out, and only `floor(n * (den - num) / den)` images are held out in
    /// total.
    pub fn split(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let per_block = self.denominator - self.numerator;
        let budget = n * per_block / self.denominator;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..n {
            if test.len() < budget && i % self.denominator < per_block {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

/// Images and calibration of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Image labels in dataset order.
    pub image_names: Vec<String>,
    pub images: Vec<ImageBuffer>,
    pub intrinsics: CameraIntrinsics,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// One reference pose per image, for evaluation.
    pub reference: Option<Vec<CameraPose>>,
    /// Scene geometry when it is known exactly (synthetic data).
    pub ground_truth_cloud: Option<GaussianCloud>,
}

impl Dataset {
    pub fn from_images(
        name: impl Into<String>,
        image_names: Vec<String>,
        images: Vec<ImageBuffer>,
        intrinsics: CameraIntrinsics,
        split: SplitRatio,
    ) -> Result<Self> {
        intrinsics.validate()?;
        if image_names.len() != images.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} images",
                image_names.len(),
                images.len()
            )));
        }
        for (name, img) in image_names.iter().zip(&images) {
            if img.dimensions() != (intrinsics.width, intrinsics.height) {
                return Err(Error::InvalidArgument(format!(
                    "image {name} is {}x{} but the intrinsics describe {}x{}",
                    img.width(),
                    img.height(),
                    intrinsics.width,
                    intrinsics.height
                )));
            }
        }
        let (train, test) = split.split(images.len());
        if train.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: train.len(),
            });
        }
        if test.is_empty() {
            warn!("{} images with split {split}: no test images held out", images.len());
        }
        Ok(Self {
            name: name.into(),
            image_names,
            images,
            intrinsics,
            train,
            test,
            reference: None,
            ground_truth_cloud: None,
        })
    }

    pub fn train_images(&self) -> Vec<ImageBuffer> {
        self.train.iter().map(|&i| self.images[i].clone()).collect()
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm")
    )
}

/// Loads every PNG/PPM in `root` in lexicographic order together with
/// `intrinsics.txt` and, when present, `reference.txt`.
pub fn load_dataset(root: &Path, split: SplitRatio) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_file() && is_image(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    let intrinsics = read_intrinsics(&root.join(INTRINSICS_FILE))?;
    let images = paths.iter().map(ImageBuffer::load).collect::<Result<Vec<_>>>()?;
    let names = paths
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let name = root
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "scene".into());
    let mut dataset = Dataset::from_images(name, names, images, intrinsics, split)?;
    let reference_path = root.join(REFERENCE_FILE);
    if reference_path.is_file() {
        let traj = read_trajectory(&reference_path)?;
        let n = dataset.images.len();
        let mut poses = vec![None; n];
        for (id, pose) in traj {
            let slot = poses
                .get_mut(id)
                .ok_or_else(|| Error::parse(&reference_path, format!("id {id} but only {n} images")))?;
            *slot = Some(pose);
        }
        let missing: Vec<usize> = (0..n).filter(|&i| poses[i].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::parse(&reference_path, format!("no pose for images {missing:?}")));
        }
        dataset.reference = Some(poses.into_iter().flatten().collect());
    }
    Ok(dataset)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Lines with comments (`#`) and surrounding whitespace removed, paired
/// with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_fields<const N: usize>(path: &Path, line_no: usize, fields: &[&str]) -> Result<[f64; N]> {
    if fields.len() != N {
        return Err(Error::parse(
            path,
            format!("line {line_no}: expected {N} values, found {}", fields.len()),
        ));
    }
    let mut out = [0.0f64; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f
            .parse()
            .map_err(|_| Error::parse(path, format!("line {line_no}: `{f}` is not a number")))?;
        if !o.is_finite() {
            return Err(Error::parse(path, format!("line {line_no}: non-finite value `{f}`")));
        }
    }
    Ok(out)
}

/// `fx fy cx cy width height` on a single line.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (no, line) = lines.next().ok_or_else(|| Error::parse(path, "no intrinsics found"))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    let [fx, fy, cx, cy, w, h] = parse_fields::<6>(path, no, &fields)?;
    if w.fract() != 0.0 || h.fract() != 0.0 || w < 1.0 || h < 1.0 {
        return Err(Error::parse(
            path,
            format!("line {no}: image size must be positive integers"),
        ));
    }
    CameraIntrinsics::new(fx, fy, cx, cy, w as usize, h as usize).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_intrinsics(k: &CameraIntrinsics, path: &Path) -> Result<()> {
    write_text(
        path,
        &format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )
}

/// Quaternion `(x, y, z, w)` of the pose rotation, with `w >= 0`.
pub fn pose_quaternion(pose: &CameraPose) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(&pose.rotation_matrix());
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.i, q.j, q.k, q.w]
}

pub fn pose_from_quaternion(translation: Vector3<f64>, q: [f64; 4]) -> Result<CameraPose> {
    let raw = Quaternion::new(q[3], q[0], q[1], q[2]);
    if !(raw.norm() > 1e-12) {
        return Err(Error::InvalidArgument("zero quaternion".into()));
    }
    let r = UnitQuaternion::from_quaternion(raw).to_rotation_matrix().into_inner();
    Ok(CameraPose::from_rotation_translation(&r, translation))
}

/// One line per pose: `id tx ty tz qx qy qz qw`, where `(t, q)` is the
/// world-to-camera transform.
pub fn format_trajectory(entries: &[(usize, CameraPose)]) -> String {
    let mut out = String::new();
    for (id, pose) in entries {
        let t = pose.translation;
        let q = pose_quaternion(pose);
        let _ = writeln!(out, "{id} {} {} {} {} {} {} {}", t.x, t.y, t.z, q[0], q[1], q[2], q[3]);
    }
    out
}

pub fn write_trajectory(entries: &[(usize, CameraPose)], path: &Path) -> Result<()> {
    write_text(path, &format_trajectory(entries))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(usize, CameraPose)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (no, line) in content_lines(&text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let Some((id, rest)) = fields.split_first() else {
            continue;
        };
        let id: usize = id
            .parse()
            .map_err(|_| Error::parse(path, format!("line {no}: id `{id}` is not a non-negative integer")))?;
        let [tx, ty, tz, qx, qy, qz, qw] = parse_fields::<7>(path, no, rest)?;
        let pose = pose_from_quaternion(Vector3::new(tx, ty, tz), [qx, qy, qz, qw])
            .map_err(|e| Error::parse(path, format!("line {no}: {e}")))?;
        if out.iter().any(|(j, _)| *j == id) {
            return Err(Error::parse(path, format!("line {no}: duplicate id {id}")));
        }
        out.push((id, pose));
    }
    Ok(out)
}

/// Vertex properties in file order. Scales are stored as logarithms and
/// opacity as a logit, matching the optimised parameters.
pub const PLY_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green",
    "blue",
];

fn ply_number(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn format_ply(cloud: &GaussianCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for p in PLY_PROPERTIES {
        let _ = writeln!(out, "property double {p}");
    }
    out.push_str("end_header\n");
    for g in &cloud.gaussians {
        let values = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        let line: Vec<String> = values.iter().map(|&v| ply_number(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn export_cloud_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    write_text(path, &format_ply(cloud))
}

pub fn import_cloud_ply(path: &Path) -> Result<GaussianCloud> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |no: usize, msg: &str| Error::parse(path, format!("line {}: {msg}", no + 1));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::parse(path, "missing `ply` magic")),
    }
    let mut count = None;
    let mut properties = Vec::new();
    loop {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::parse(path, "header is not terminated"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] | ["comment", ..] => {}
            ["format", ..] => return Err(bad(no, "only ASCII PLY is supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad(no, "bad vertex count"))?),
            ["element", ..] => return Err(bad(no, "unexpected element")),
            ["property", _, name] => properties.push(name.to_string()),
            _ => return Err(bad(no, "unrecognised header line")),
        }
    }
    if properties != PLY_PROPERTIES {
        return Err(Error::parse(
            path,
            format!("expected properties {PLY_PROPERTIES:?}, found {properties:?}"),
        ));
    }
    let count = count.ok_or_else(|| Error::parse(path, "no vertex element"))?;
    let mut gaussians = Vec::with_capacity(count);
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if gaussians.len() == count {
            return Err(bad(no, "more vertices than declared"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let v = parse_fields::<14>(path, no + 1, &fields)?;
        gaussians.push(GaussianPrimitive {
            position: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            rotation: [v[6], v[7], v[8], v[9]],
            opacity_logit: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    if gaussians.len() != count {
        return Err(Error::parse(
            path,
            format!("declared {count} vertices, found {}", gaussians.len()),
        ));
    }
    Ok(GaussianCloud::new(gaussians))
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, line) in content_lines(text) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}: line {no}: expected `key = value`", path.display())))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::Config(format!("{}: line {no}: empty key", path.display())));
        }
        if out.iter().any(|(o, _)| *o == k) {
            return Err(Error::Config(format!(
                "{}: line {no}: duplicate key `{k}`",
                path.display()
            )));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

pub fn write_key_values(entries: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    write_text(path, &out)
}

/// Comma separated table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// A minimal SVG line chart of `(x, y)` series.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let points = series
        .iter()
        .flat_map(|(_, s)| s.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (v, anchor, x, y) in [(x0, "start", M, H - M + 16.0), (x1, "end", W - M, H - M + 16.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#,
            tick(v)
        );
    }
    for (v, y) in [(y0, H - M), (y1, M)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            M - 4.0,
            y + 4.0,
            tick(v)
        );
    }
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                d.join(" ")
            );
        }
        let ly = M + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" text-anchor="end" fill="{color}">{}</text>"#,
            W - M,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, &[(f64, f64)])],
) -> Result<()> {
    write_text(path, &line_chart_svg(title, x_label, y_label, series))
}

pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
