//! Pinhole cameras, plane hypotheses and plane-sweep warp grids.
//!
//! Poses map points expressed in the reference camera frame into the paired
//! camera frame: `X_paired = R * X_ref + t`. Integer pixel coordinates refer
//! to pixel centers.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Projected depths at or below this value are treated as behind the camera.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-9;

/// Upper depth used by uniform sampling when none is given.
pub const DEFAULT_MAX_DEPTH: f64 = 10.0;

const ROTATION_TOLERANCE: f64 = 1e-9;

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
        let k = Self {
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

    fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("intrinsics must be finite"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Rescale for a feature map of a different resolution, keeping pixel
    /// centers aligned.
    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self> {
        if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
            return Err(Error::invalid(format!(
                "scale factors must be positive, got ({sx}, {sy})"
            )));
        }
        let width = (self.width as f64 * sx).round() as usize;
        let height = (self.height as f64 * sy).round() as usize;
        Ok(Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width: width.max(1),
            height: height.max(1),
        })
    }
}

/// Convenience wrapper around [`CameraIntrinsics::scaled`].
pub fn scale_intrinsics(k: &CameraIntrinsics, sx: f64, sy: f64) -> Result<CameraIntrinsics> {
    k.scaled(sx, sy)
}

/// Rigid transform from reference-camera coordinates to paired-camera
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(orth <= ROTATION_TOLERANCE) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |R^T R - I| = {orth:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "rotation determinant must be 1, got {det}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// The transform from the paired camera back to the reference camera.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Relative pose between two world-to-camera transforms: maps points in
    /// the `reference` camera frame into the `paired` camera frame.
    pub fn relative(reference: &CameraPose, paired: &CameraPose) -> Self {
        let rotation = paired.rotation * reference.rotation.transpose();
        Self {
            rotation,
            translation: paired.translation - rotation * reference.translation,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    /// Planes uniformly spaced in 1/d.
    InverseDepth,
    /// Planes uniformly spaced in depth between `d_min` and `d_max`.
    UniformDepth { d_max: f64 },
}

impl SamplingMode {
    pub fn uniform_default() -> Self {
        SamplingMode::UniformDepth {
            d_max: DEFAULT_MAX_DEPTH,
        }
    }
}

/// The swept depth values. Label `l` (1-based) corresponds to `depths[l - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneHypothesisSet {
    pub depths: Vec<f64>,
    pub d_min: f64,
    pub mode: SamplingMode,
}

impl PlaneHypothesisSet {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// Smallest and largest representable depth.
    pub fn range(&self) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &d in &self.depths {
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }
}

/// Generate `count` plane depths.
///
/// In inverse-depth mode `d_l = count * d_min / l` for `l = 1..=count`, so
/// label 1 is the farthest plane and label `count` sits at `d_min`. Uniform
/// mode follows the same far-to-near ordering.
pub fn sample_planes(count: usize, d_min: f64, mode: SamplingMode) -> Result<PlaneHypothesisSet> {
    if count == 0 {
        return Err(Error::invalid("plane count must be at least 1"));
    }
    if !(d_min > 0.0 && d_min.is_finite()) {
        return Err(Error::invalid(format!("d_min must be positive, got {d_min}")));
    }
    let depths = match mode {
        SamplingMode::InverseDepth => {
            let numerator = count as f64 * d_min;
            (1..=count).map(|l| numerator / l as f64).collect()
        }
        SamplingMode::UniformDepth { d_max } => {
            if !(d_max > d_min && d_max.is_finite()) {
                return Err(Error::invalid(format!(
                    "uniform sampling needs d_max > d_min, got d_min={d_min} d_max={d_max}"
                )));
            }
            if count == 1 {
                vec![d_min]
            } else {
                let step = (d_max - d_min) / (count - 1) as f64;
                (0..count).map(|i| d_max - step * i as f64).collect()
            }
        }
    };
    Ok(PlaneHypothesisSet {
        depths,
        d_min,
        mode,
    })
}

/// Result of projecting one reference pixel into a paired view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    /// Depth of the point in the paired camera frame.
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > MIN_PROJECTED_DEPTH
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.in_front()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x <= (width - 1) as f64
            && self.y <= (height - 1) as f64
    }
}

/// Back-project pixel `(u, v)` to `depth` in the reference frame, move it into
/// the paired frame and reproject. Points behind the paired camera come back
/// with `depth <= MIN_PROJECTED_DEPTH` and NaN-free but meaningless pixel
/// coordinates.
pub fn project_pixel(
    u: f64,
    v: f64,
    depth: f64,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Projection {
    let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    project_ray(u, v, &ray, depth, k, pose)
}

/// Reprojection written as an offset from the source pixel,
/// `u' = u + fx * (X - ray_x * Z) / Z`, which is algebraically the usual
/// `fx * X / Z + cx` but exactly `u` under the identity pose.
#[inline]
fn project_ray(
    u: f64,
    v: f64,
    ray: &Vector3<f64>,
    depth: f64,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Projection {
    let p = pose.transform(&(ray * depth));
    let z = p.z;
    if z <= MIN_PROJECTED_DEPTH {
        return Projection {
            x: -1.0,
            y: -1.0,
            depth: z,
        };
    }
    Projection {
        x: u + k.fx * (p.x - ray.x * z) / z,
        y: v + k.fy * (p.y - ray.y * z) / z,
        depth: z,
    }
}

/// Continuous source coordinates for every plane and reference pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGrid {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    /// `planes * height * width` interleaved `(x, y)` pairs.
    pub coords: Vec<f64>,
    pub in_bounds: Vec<bool>,
}

impl WarpGrid {
    #[inline]
    pub fn index(&self, plane: usize, y: usize, x: usize) -> usize {
        (plane * self.height + y) * self.width + x
    }

    pub fn coord(&self, plane: usize, y: usize, x: usize) -> (f64, f64) {
        let i = self.index(plane, y, x);
        (self.coords[2 * i], self.coords[2 * i + 1])
    }
}

/// Dense plane-sweep warp for a `width x height` reference image. The
/// intrinsics must already match that resolution.
pub fn compute_warp_grid(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    planes: &PlaneHypothesisSet,
    width: usize,
    height: usize,
) -> Result<WarpGrid> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("warp grid size must be non-zero"));
    }
    let n = planes.len() * height * width;
    let mut coords = vec![0.0; 2 * n];
    let mut in_bounds = vec![false; n];
    let k_inv = k.inverse_matrix();

    coords
        .par_chunks_mut(2 * width)
        .zip(in_bounds.par_chunks_mut(width))
        .enumerate()
        .for_each(|(row, (coord_row, mask_row))| {
            let plane = row / height;
            let y = row % height;
            let depth = planes.depths[plane];
            for x in 0..width {
                let (u, v) = (x as f64, y as f64);
                let ray = k_inv * Vector3::new(u, v, 1.0);
                let proj = project_ray(u, v, &ray, depth, k, pose);
                coord_row[2 * x] = proj.x;
                coord_row[2 * x + 1] = proj.y;
                mask_row[x] = proj.in_bounds(width, height);
            }
        });

    Ok(WarpGrid {
        planes: planes.len(),
        height,
        width,
        coords,
        in_bounds,
    })
}

/// A view's calibration as stored in a camera file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// Parse the plain-text camera format: one block of three lines per camera
/// (`K fx fy cx cy width height`, `R r11 .. r33`, `t tx ty tz`). Blank lines
/// and `#` comments are ignored.
pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let mut lines = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let trimmed = raw.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            lines.push((offset, trimmed));
        }
        offset += raw.len();
    }
    if lines.len() % 3 != 0 {
        return Err(Error::Parse {
            what: "camera file",
            offset,
            msg: format!("expected blocks of 3 lines, found {} lines", lines.len()),
        });
    }

    let parse_line = |(offset, line): (usize, &str), tag: &str, count: usize| -> Result<Vec<f64>> {
        let mut parts = line.split_whitespace();
        let err = |msg: String| Error::Parse {
            what: "camera file",
            offset,
            msg,
        };
        if parts.next() != Some(tag) {
            return Err(err(format!("expected line starting with `{tag}`")));
        }
        let vals = parts
            .map(|p| p.parse::<f64>().map_err(|e| err(format!("bad number `{p}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != count {
            return Err(err(format!("`{tag}` needs {count} values, got {}", vals.len())));
        }
        Ok(vals)
    };

    lines
        .chunks(3)
        .map(|block| {
            let k = parse_line(block[0], "K", 6)?;
            let r = parse_line(block[1], "R", 9)?;
            let t = parse_line(block[2], "t", 3)?;
            let as_size = |v: f64| -> Result<usize> {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Parse {
                        what: "camera file",
                        offset: block[0].0,
                        msg: format!("image size must be a positive integer, got {v}"),
                    })
                }
            };
            let intrinsics =
                CameraIntrinsics::new(k[0], k[1], k[2], k[3], as_size(k[4])?, as_size(k[5])?)?;
            let pose = CameraPose::new(
                Matrix3::from_row_slice(&r),
                Vector3::new(t[0], t[1], t[2]),
            )?;
            Ok(Camera { intrinsics, pose })
        })
        .collect()
}

pub fn format_cameras(cameras: &[Camera]) -> String {
    let mut out = String::new();
    for (i, cam) in cameras.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let k = &cam.intrinsics;
        let _ = writeln!(
            out,
            "K {:?} {:?} {:?} {:?} {} {}",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        );
        out.push('R');
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(out, " {:?}", cam.pose.rotation[(r, c)]);
            }
        }
        out.push('\n');
        let t = &cam.pose.translation;
        let _ = writeln!(out, "t {:?} {:?} {:?}", t.x, t.y, t.z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    #[test]
    fn inverse_depth_planes_match_closed_form() {
        let planes = sample_planes(64, 0.5, SamplingMode::InverseDepth).unwrap();
        assert_eq!(planes.depths[63], 0.5);
        assert_eq!(planes.depths[0], 32.0);
        for (i, d) in planes.depths.iter().enumerate() {
            assert_eq!(*d, 64.0 * 0.5 / (i + 1) as f64);
        }
        let single = sample_planes(1, 2.0, SamplingMode::InverseDepth).unwrap();
        assert_eq!(single.depths, vec![2.0]);
    }

    #[test]
    fn inverse_spacing_is_constant() {
        let planes = sample_planes(64, 0.5, SamplingMode::InverseDepth).unwrap();
        let gaps: Vec<f64> = planes
            .depths
            .windows(2)
            .map(|w| 1.0 / w[1] - 1.0 / w[0])
            .collect();
        for g in &gaps {
            assert!((g - gaps[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_planes_cover_range() {
        let planes = sample_planes(20, 0.5, SamplingMode::uniform_default()).unwrap();
        assert_eq!(planes.depths[0], 10.0);
        assert!((planes.depths[19] - 0.5).abs() < 1e-12);
        let step = planes.depths[0] - planes.depths[1];
        for w in planes.depths.windows(2) {
            assert!((w[0] - w[1] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_plane_arguments_are_rejected() {
        assert!(sample_planes(0, 0.5, SamplingMode::InverseDepth).is_err());
        assert!(sample_planes(8, 0.0, SamplingMode::InverseDepth).is_err());
        assert!(sample_planes(8, -1.0, SamplingMode::InverseDepth).is_err());
        assert!(sample_planes(8, 2.0, SamplingMode::UniformDepth { d_max: 1.0 }).is_err());
    }

    #[test]
    fn identity_projection() {
        let p = project_pixel(50.0, 50.0, 3.0, &k100(), &CameraPose::identity());
        assert_eq!((p.x, p.y, p.depth), (50.0, 50.0, 3.0));
    }

    #[test]
    fn lateral_translation_shifts_by_focal_baseline_over_depth() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let p = project_pixel(50.0, 50.0, 2.0, &k100(), &pose);
        assert!((p.x - 55.0).abs() < 1e-12);
        assert!((p.y - 50.0).abs() < 1e-12);
        assert!((p.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn forward_translation_magnifies() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -0.5)).unwrap();
        let p = project_pixel(60.0, 50.0, 2.0, &k100(), &pose);
        assert!((p.x - (50.0 + 10.0 * 2.0 / 1.5)).abs() < 1e-12);
        assert!((p.depth - 1.5).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -5.0)).unwrap();
        let p = project_pixel(50.0, 50.0, 2.0, &k100(), &pose);
        assert!(!p.in_front());
        assert!(!p.in_bounds(101, 101));
    }

    #[test]
    fn identity_grid_is_exact() {
        let k = CameraIntrinsics::new(20.0, 20.0, 3.5, 2.5, 8, 6).unwrap();
        let planes = sample_planes(4, 0.5, SamplingMode::InverseDepth).unwrap();
        let grid = compute_warp_grid(&k, &CameraPose::identity(), &planes, 8, 6).unwrap();
        for l in 0..4 {
            for y in 0..6 {
                for x in 0..8 {
                    assert_eq!(grid.coord(l, y, x), (x as f64, y as f64));
                    assert!(grid.in_bounds[grid.index(l, y, x)]);
                }
            }
        }
    }

    #[test]
    fn far_right_motion_leaves_grid_out_of_bounds() {
        let k = CameraIntrinsics::new(4.0, 4.0, 1.5, 1.5, 4, 4).unwrap();
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(100.0, 0.0, 0.0)).unwrap();
        let planes = sample_planes(3, 1.0, SamplingMode::InverseDepth).unwrap();
        let grid = compute_warp_grid(&k, &pose, &planes, 4, 4).unwrap();
        assert!(grid.in_bounds.iter().all(|b| !b));
    }

    #[test]
    fn intrinsics_scaling() {
        let k = CameraIntrinsics::new(100.0, 80.0, 49.5, 39.5, 100, 80).unwrap();
        assert_eq!(k.scaled(1.0, 1.0).unwrap(), k);
        let q = k.scaled(0.25, 0.25).unwrap();
        assert_eq!(q.fx, 25.0);
        assert_eq!(q.cx, 12.0);
        assert_eq!((q.width, q.height), (25, 20));
        let back = q.scaled(4.0, 4.0).unwrap();
        assert!((back.fx - k.fx).abs() < 1e-12);
        assert!((back.cx - k.cx).abs() < 1e-12);
        assert!((back.cy - k.cy).abs() < 1e-12);
        assert!(k.scaled(0.0, 1.0).is_err());
        assert!(k.scaled(1.0, -2.0).is_err());
    }

    #[test]
    fn invalid_intrinsics_and_poses() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(skewed, Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn relative_pose_of_world_to_camera_inputs() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.05).into_inner();
        let a = CameraPose::new(rot, Vector3::new(0.3, -0.1, 1.0)).unwrap();
        let b = CameraPose::new(rot.transpose(), Vector3::new(-0.2, 0.4, 0.0)).unwrap();
        let rel = CameraPose::relative(&a, &b);
        let world = Vector3::new(0.7, -0.3, 4.0);
        let via_rel = rel.transform(&a.transform(&world));
        assert!((via_rel - b.transform(&world)).norm() < 1e-12);
    }

    #[test]
    fn camera_file_round_trip() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.01, 0.02, -0.03).into_inner();
        let cams = vec![
            Camera {
                intrinsics: k100(),
                pose: CameraPose::identity(),
            },
            Camera {
                intrinsics: k100(),
                pose: CameraPose::new(rot, Vector3::new(0.1, 0.0, -0.02)).unwrap(),
            },
        ];
        let text = format_cameras(&cams);
        assert_eq!(parse_cameras(&text).unwrap(), cams);
    }

    #[test]
    fn camera_file_errors_report_offsets() {
        let text = "K 1 1 0 0 4 4\nR 1 0 0 0 1 0 0 0 1\nt 0 0 x\n";
        match parse_cameras(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 34),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_cameras("K 1 1 0 0 4 4\n").is_err());
    }
}
