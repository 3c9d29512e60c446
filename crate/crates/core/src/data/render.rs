//! Procedural scenes rendered by ray casting.
//!
//! Geometry lives in the reference camera frame. Surfaces carry a 3D value-noise
//! texture evaluated at the hit point, so every view sees the same intensity
//! for the same scene point (Lambertian, no lighting). Images are point-sampled
//! at pixel centres.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Image, Scene};
use crate::error::{Error, Result};
use crate::geometry::{project_pixel, Camera, CameraIntrinsics, CameraPose};
use crate::network::DepthMap;

/// Re-draws allowed before a spec is declared unusable.
pub const MAX_ATTEMPTS: u32 = 32;

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// Tilted background plane with one or two floating rectangles.
    TexturedPlanes,
    /// Camera inside a box: back wall, side walls, floor and ceiling.
    BoxRoom,
    /// Spheres in front of a background plane.
    SphereField,
    /// One plane parallel to the image at `depth`.
    FrontoPlane { depth: f64 },
    /// Plane through `(0, 0, depth)` rotated by `angle` radians about the
    /// vertical axis.
    TiltedPlane { depth: f64, angle: f64 },
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::TexturedPlanes => "textured-planes",
            Layout::BoxRoom => "box-room",
            Layout::SphereField => "sphere-field",
            Layout::FrontoPlane { .. } => "fronto-plane",
            Layout::TiltedPlane { .. } => "tilted-plane",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "planes" | "textured-planes" => Ok(Layout::TexturedPlanes),
            "box-room" | "room" => Ok(Layout::BoxRoom),
            "sphere-field" | "spheres" => Ok(Layout::SphereField),
            other => Err(Error::invalid(format!(
                "unknown layout `{other}` (expected planes, box-room or sphere-field)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub layout: Layout,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub paired_views: usize,
    /// Camera-centre distance from the reference, metres.
    pub baseline: (f64, f64),
    /// Maximum rotation of a paired camera, radians.
    pub rotation_jitter: f64,
    pub octaves: u32,
    /// Base texture frequency, cycles per metre.
    pub texture_scale: f64,
    /// Side of the centred constant-intensity patch as a fraction of the
    /// image; 0 disables it.
    pub textureless_patch: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Every reference depth must fall inside this range.
    pub depth_range: (f64, f64),
    /// Multiplies the geometry of the random layouts. Textures follow the
    /// geometry, so only parallax changes.
    pub scale: f64,
}

impl SceneSpec {
    /// 32x32 scenes whose depths sit strictly inside the toy network's
    /// label range (0.5 m to 4 m), away from the end labels a soft-argmax can
    /// only approach. The random layouts are shrunk to half size so most
    /// depths fall where the inverse-depth planes are dense.
    pub fn toy(layout: Layout) -> Self {
        Self {
            layout,
            width: 32,
            height: 32,
            focal: 32.0,
            paired_views: 2,
            baseline: (0.1, 0.2),
            rotation_jitter: 0.02,
            octaves: 3,
            texture_scale: 3.0,
            textureless_patch: 0.0,
            noise: 0.0,
            depth_range: (0.6, 3.8),
            scale: 0.5,
        }
    }

    /// Low-frequency single-octave texture: bilinear resampling of these
    /// images is accurate to well under one grey level.
    pub fn smooth(layout: Layout) -> Self {
        Self {
            octaves: 1,
            texture_scale: 0.25,
            ..Self::toy(layout)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (bmin, bmax) = self.baseline;
        if self.width < 2 || self.height < 2 {
            return Err(Error::invalid("scene images must be at least 2x2"));
        }
        if self.paired_views == 0 {
            return Err(Error::invalid("a scene needs at least one paired view"));
        }
        if !(bmin > 0.0 && bmax >= bmin) {
            return Err(Error::invalid(format!("baseline range ({bmin}, {bmax}) must be positive")));
        }
        if !(self.focal > 0.0 && self.texture_scale > 0.0 && self.noise >= 0.0 && self.rotation_jitter >= 0.0) {
            return Err(Error::invalid("focal, texture scale, noise and jitter must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.textureless_patch) {
            return Err(Error::invalid("textureless patch fraction must be in [0, 1)"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scene scale {} must be positive", self.scale)));
        }
        if !(self.depth_range.0 > 0.0 && self.depth_range.1 > self.depth_range.0) {
            return Err(Error::invalid("depth range must be positive and non-empty"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Generated scene plus the seed that produced it and per-view ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// Number of draws needed (1 when the first layout was usable).
    pub attempts: u32,
    pub scene: Scene,
    /// Depth along each view's optical axis, per view.
    pub view_depths: Vec<Vec<f64>>,
    /// Index of the surface seen by each pixel, per view.
    pub surface_ids: Vec<Vec<usize>>,
}

/// Relative depth disagreement tolerated between a projected reference point
/// and the surface a paired view actually sees there.
const COVISIBLE_DEPTH_TOLERANCE: f64 = 0.05;

impl SyntheticScene {
    /// Reference pixels whose scene point is visible in paired view `k` and
    /// whose bilinear footprint there lies on the same surface, so warping
    /// them compares like with like.
    pub fn covisible(&self, k: usize) -> Vec<bool> {
        let s = &self.scene;
        let cam = &s.cameras[0].intrinsics;
        let (w, h) = (cam.width, cam.height);
        let pose = s.relative_pose(k);
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let Some(d) = s.depth.get(x, y) else { continue };
                let p = project_pixel(x as f64, y as f64, d, cam, &pose);
                if !p.in_bounds(w, h) {
                    continue;
                }
                let (x0, y0) = (p.x.floor() as usize, p.y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let taps = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
                mask[i] = taps.iter().all(|&(tx, ty)| {
                    let j = ty * w + tx;
                    self.surface_ids[k][j] == self.surface_ids[0][i]
                        && (self.view_depths[k][j] - p.depth).abs() <= COVISIBLE_DEPTH_TOLERANCE * p.depth
                });
            }
        }
        mask
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// `normal . X = offset`, unbounded.
    Plane { normal: Vector3<f64>, offset: f64 },
    /// Rectangle `center + a*u + b*v`, `|a|, |b| <= 1`, with `u`, `v` orthogonal.
    Quad {
        center: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
    },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Inside faces of an axis-aligned box.
    Room { min: Vector3<f64>, max: Vector3<f64> },
}

impl Shape {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Plane { normal, offset } => {
                let denom = normal.dot(d);
                if denom.abs() < RAY_EPS {
                    return None;
                }
                let t = (offset - normal.dot(o)) / denom;
                (t > RAY_EPS).then_some(t)
            }
            Shape::Quad { center, u, v } => {
                let normal = u.cross(&v);
                let denom = normal.dot(d);
                if denom.abs() < RAY_EPS {
                    return None;
                }
                let t = normal.dot(&(center - o)) / denom;
                if t <= RAY_EPS {
                    return None;
                }
                let rel = o + d * t - center;
                let a = rel.dot(&u) / u.norm_squared();
                let b = rel.dot(&v) / v.norm_squared();
                (a.abs() <= 1.0 && b.abs() <= 1.0).then_some(t)
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t > RAY_EPS)
            }
            Shape::Room { min, max } => (0..3)
                .filter(|&i| d[i].abs() > RAY_EPS)
                .map(|i| {
                    let wall = if d[i] > 0.0 { max[i] } else { min[i] };
                    (wall - o[i]) / d[i]
                })
                .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
                .filter(|t| *t > RAY_EPS),
        }
    }

    fn scaled(self, s: f64) -> Shape {
        match self {
            Shape::Plane { normal, offset } => Shape::Plane { normal, offset: offset * s },
            Shape::Quad { center, u, v } => Shape::Quad { center: center * s, u: u * s, v: v * s },
            Shape::Sphere { center, radius } => Shape::Sphere { center: center * s, radius: radius * s },
            Shape::Room { min, max } => Shape::Room { min: min * s, max: max * s },
        }
    }

    /// Whether `p` is strictly inside solid geometry (or outside a room).
    fn encloses_wrongly(&self, p: &Vector3<f64>) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() <= radius,
            Shape::Room { min, max } => (0..3).any(|i| p[i] <= min[i] || p[i] >= max[i]),
            Shape::Plane { normal, offset } => (normal.dot(p) - offset).abs() < 1e-6,
            Shape::Quad { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Surface {
    shape: Shape,
    texture_seed: u64,
}

fn splitmix(mut h: u64) -> u64 {
    h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// Lattice value in `[-1, 1]`.
fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64 ^ splitmix(iz as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let (ix, iy, iz) = (base.x as i64, base.y as i64, base.z as i64);
    let (wx, wy, wz) = (fade(f.x), fade(f.y), fade(f.z));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let corner = |dx, dy, dz| lattice(ix + dx, iy + dy, iz + dz, seed);
    let x00 = lerp(corner(0, 0, 0), corner(1, 0, 0), wx);
    let x10 = lerp(corner(0, 1, 0), corner(1, 1, 0), wx);
    let x01 = lerp(corner(0, 0, 1), corner(1, 0, 1), wx);
    let x11 = lerp(corner(0, 1, 1), corner(1, 1, 1), wx);
    lerp(lerp(x00, x10, wy), lerp(x01, x11, wy), wz)
}

struct Rendered {
    shade: Vec<f64>,
    depth: Vec<f64>,
    surface: Vec<usize>,
}

impl Rendered {
    fn with_capacity(n: usize) -> Self {
        Self {
            shade: Vec::with_capacity(n),
            depth: Vec::with_capacity(n),
            surface: Vec::with_capacity(n),
        }
    }
}

struct World {
    surfaces: Vec<Surface>,
    spec: SceneSpec,
    k: CameraIntrinsics,
}

impl World {
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        self.surfaces
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.shape.intersect(o, d).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn in_patch(&self, p: &Vector3<f64>) -> bool {
        let frac = self.spec.textureless_patch;
        if frac <= 0.0 || p.z <= 0.0 {
            return false;
        }
        let u = self.k.fx * p.x / p.z + self.k.cx;
        let v = self.k.fy * p.y / p.z + self.k.cy;
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        let (hw, hh) = (frac * w / 2.0, frac * h / 2.0);
        (u - self.k.cx).abs() <= hw && (v - self.k.cy).abs() <= hh
    }

    fn texture_unit(&self) -> f64 {
        match self.spec.layout {
            Layout::FrontoPlane { .. } | Layout::TiltedPlane { .. } => 1.0,
            _ => self.spec.scale,
        }
    }

    fn shade(&self, p: &Vector3<f64>, surface: usize) -> f64 {
        if self.in_patch(p) {
            return 0.5;
        }
        let seed = self.surfaces[surface].texture_seed;
        let (mut total, mut amp, mut norm, mut freq) = (0.0, 1.0, 0.0, self.spec.texture_scale / self.texture_unit());
        for octave in 0..self.spec.octaves.max(1) {
            total += amp * value_noise(&(p * freq), seed.wrapping_add(octave as u64));
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        (0.5 + 0.45 * total / norm).clamp(0.0, 1.0)
    }

    /// Intensities, depths and surface ids for one camera.
    fn render(&self, pose: &CameraPose) -> Option<Rendered> {
        let (w, h) = (self.spec.width, self.spec.height);
        let to_world = pose.inverse();
        let origin = to_world.translation;
        let rows: Vec<Option<Rendered>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = Rendered::with_capacity(w);
                for x in 0..w {
                    let ray = Vector3::new(
                        (x as f64 - self.k.cx) / self.k.fx,
                        (y as f64 - self.k.cy) / self.k.fy,
                        1.0,
                    );
                    let dir = to_world.rotation * ray;
                    let (t, s) = self.cast(&origin, &dir)?;
                    let hit = origin + dir * t;
                    row.shade.push(self.shade(&hit, s));
                    // ray has unit z, so t is the depth along this camera's axis
                    row.depth.push(t);
                    row.surface.push(s);
                }
                Some(row)
            })
            .collect();
        let mut out = Rendered::with_capacity(w * h);
        for row in rows {
            let row = row?;
            out.shade.extend(row.shade);
            out.depth.extend(row.depth);
            out.surface.extend(row.surface);
        }
        Some(out)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

fn tilted_normal(rng: &mut ChaCha8Rng, max_tilt: f64) -> Vector3<f64> {
    let axis = Unit::new_normalize(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0));
    Rotation3::from_axis_angle(&axis, uniform(rng, 0.0, max_tilt)) * Vector3::z()
}

fn layout_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let shapes = random_shapes(spec.layout, rng);
    match spec.layout {
        Layout::FrontoPlane { .. } | Layout::TiltedPlane { .. } => shapes,
        _ => shapes.into_iter().map(|s| s.scaled(spec.scale)).collect(),
    }
}

fn random_shapes(layout: Layout, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let background = |rng: &mut ChaCha8Rng| {
        let normal = tilted_normal(rng, 0.35);
        let depth = uniform(rng, 2.4, 3.2);
        Shape::Plane {
            normal,
            offset: normal.z * depth,
        }
    };
    match layout {
        Layout::FrontoPlane { depth } => vec![Shape::Plane {
            normal: Vector3::z(),
            offset: depth,
        }],
        Layout::TiltedPlane { depth, angle } => {
            let normal = Vector3::new(angle.sin(), 0.0, angle.cos());
            vec![Shape::Plane {
                normal,
                offset: normal.z * depth,
            }]
        }
        Layout::TexturedPlanes => {
            let mut shapes = vec![background(rng)];
            for _ in 0..rng.random_range(1..=2) {
                let depth = uniform(rng, 0.9, 2.0);
                let center = Vector3::new(
                    uniform(rng, -0.3, 0.3) * depth,
                    uniform(rng, -0.3, 0.3) * depth,
                    depth,
                );
                let normal = tilted_normal(rng, 0.5);
                // Roughly a half turn. Changing the bound changes every generated scene.
                #[allow(clippy::approx_constant)]
                let spin = Rotation3::from_axis_angle(&Unit::new_normalize(normal), uniform(rng, 0.0, 3.14));
                let base = Rotation3::rotation_between(&Vector3::z(), &normal).unwrap_or_else(Rotation3::identity);
                let u = spin * base * Vector3::x() * uniform(rng, 0.15, 0.35) * depth;
                let v = spin * base * Vector3::y() * uniform(rng, 0.15, 0.35) * depth;
                shapes.push(Shape::Quad { center, u, v });
            }
            shapes
        }
        Layout::BoxRoom => {
            let half_w = uniform(rng, 0.8, 1.3);
            let half_h = uniform(rng, 0.8, 1.3);
            let back = uniform(rng, 2.4, 3.4);
            let shift = Vector3::new(uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), 0.0);
            vec![Shape::Room {
                min: Vector3::new(-half_w, -half_h, -1.0) + shift,
                max: Vector3::new(half_w, half_h, back) + shift,
            }]
        }
        Layout::SphereField => {
            let mut shapes = vec![background(rng)];
            for _ in 0..rng.random_range(3..=5) {
                let depth = uniform(rng, 1.0, 2.1);
                let center = Vector3::new(
                    uniform(rng, -0.4, 0.4) * depth,
                    uniform(rng, -0.4, 0.4) * depth,
                    depth,
                );
                shapes.push(Shape::Sphere {
                    center,
                    radius: uniform(rng, 0.15, 0.35),
                });
            }
            shapes
        }
    }
}

fn paired_pose(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<CameraPose> {
    let phi = uniform(rng, 0.0, std::f64::consts::TAU);
    let dir = Vector3::new(phi.cos(), phi.sin(), uniform(rng, -0.3, 0.3)).normalize();
    let centre = dir * uniform(rng, spec.baseline.0, spec.baseline.1);
    let jitter = Rotation3::from_axis_angle(&random_unit(rng), uniform(rng, 0.0, spec.rotation_jitter));
    // world-to-camera: X_cam = R (X - C)
    let rotation = *jitter.inverse().matrix();
    CameraPose::new(rotation, -(rotation * centre))
}

fn attempt(spec: &SceneSpec, seed: u64, attempts: u32, rng: &mut ChaCha8Rng) -> Result<Option<SyntheticScene>> {
    let k = spec.intrinsics()?;
    let shapes = layout_shapes(spec, rng);
    let surfaces = shapes
        .into_iter()
        .map(|shape| Surface {
            shape,
            texture_seed: rng.random(),
        })
        .collect();
    let world = World {
        surfaces,
        spec: *spec,
        k,
    };
    let mut poses = vec![CameraPose::identity()];
    for _ in 0..spec.paired_views {
        poses.push(paired_pose(spec, rng)?);
    }
    let centres: Vec<Vector3<f64>> = poses.iter().map(|p| p.inverse().translation).collect();
    if world
        .surfaces
        .iter()
        .any(|s| centres.iter().any(|c| s.shape.encloses_wrongly(c)))
    {
        return Ok(None);
    }

    let mut images = Vec::with_capacity(poses.len());
    let mut view_depths = Vec::with_capacity(poses.len());
    let mut surface_ids = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let Some(r) = world.render(pose) else {
            return Ok(None);
        };
        if i == 0 {
            let (lo, hi) = spec.depth_range;
            if r.depth.iter().any(|d| *d < lo || *d > hi) {
                return Ok(None);
            }
        }
        images.push(r.shade);
        view_depths.push(r.depth);
        surface_ids.push(r.surface);
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
        for img in &mut images {
            for p in img.iter_mut() {
                *p = (*p + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }

    let images = images
        .into_iter()
        .map(|px| Image::new(spec.width, spec.height, px))
        .collect::<Result<Vec<_>>>()?;
    let cameras = poses
        .into_iter()
        .map(|pose| Camera { intrinsics: k, pose })
        .collect();
    let scene = Scene {
        images,
        depth: DepthMap::from_values(spec.width, spec.height, view_depths[0].clone())?,
        cameras,
    };
    Ok(Some(SyntheticScene {
        seed,
        attempts,
        scene,
        view_depths,
        surface_ids,
    }))
}

/// Render a scene. A draw that puts a camera inside geometry, leaves a pixel
/// without a surface or a depth outside `spec.depth_range` is discarded and
/// redrawn from the next random stream, at most [`MAX_ATTEMPTS`] times.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    for n in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(n as u64);
        if let Some(scene) = attempt(spec, seed, n + 1, &mut rng)? {
            return Ok(scene);
        }
    }
    Err(Error::InvalidState(format!(
        "no usable {} layout for seed {seed} after {MAX_ATTEMPTS} attempts",
        spec.layout.name()
    )))
}

/// Scenes for each seed, generated in parallel.
pub fn generate_dataset(spec: &SceneSpec, seeds: &[u64]) -> Result<Vec<SyntheticScene>> {
    seeds.par_iter().map(|&s| generate_scene(spec, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_pixel;

    fn plane_spec(layout: Layout) -> SceneSpec {
        SceneSpec {
            rotation_jitter: 0.0,
            ..SceneSpec::toy(layout)
        }
    }

    #[test]
    fn fronto_plane_has_constant_depth() {
        let s = generate_scene(&plane_spec(Layout::FrontoPlane { depth: 2.0 }), 3).unwrap();
        assert!(s.scene.depth.depth.iter().all(|d| (*d - 2.0).abs() < 1e-12));
        assert_eq!(s.scene.images.len(), 3);
        assert_eq!(s.attempts, 1);
    }

    #[test]
    fn tilted_plane_matches_ray_plane_oracle() {
        let (depth, angle) = (2.0, 0.4f64);
        let spec = plane_spec(Layout::TiltedPlane { depth, angle });
        let s = generate_scene(&spec, 1).unwrap();
        let k = spec.intrinsics().unwrap();
        // independent oracle: Z = d cos a / (sin a * x_n + cos a), x_n = (u - cx) / f
        for y in 0..spec.height {
            for x in 0..spec.width {
                let xn = (x as f64 - k.cx) / k.fx;
                let want = depth * angle.cos() / (angle.sin() * xn + angle.cos());
                let got = s.scene.depth.get(x, y).unwrap();
                assert!((got - want).abs() < 1e-12 * want, "{x},{y}: {got} vs {want}");
            }
        }
        // inverse depth is affine in the column index and constant down columns
        let inv = |x: usize, y: usize| 1.0 / s.scene.depth.get(x, y).unwrap();
        let step = inv(1, 0) - inv(0, 0);
        for y in 0..spec.height {
            for x in 1..spec.width {
                assert!((inv(x, y) - inv(x - 1, y) - step).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        for layout in [Layout::TexturedPlanes, Layout::BoxRoom, Layout::SphereField] {
            let spec = SceneSpec {
                noise: 0.02,
                ..SceneSpec::toy(layout)
            };
            let a = generate_scene(&spec, 42).unwrap();
            let b = generate_scene(&spec, 42).unwrap();
            assert_eq!(a, b, "{}", layout.name());
            let c = generate_scene(&spec, 43).unwrap();
            assert_ne!(a.scene.images[0], c.scene.images[0]);
        }
    }

    #[test]
    fn depths_stay_in_range() {
        let spec = SceneSpec::toy(Layout::SphereField);
        for seed in 0..8 {
            let s = generate_scene(&spec, seed).unwrap();
            let (lo, hi) = spec.depth_range;
            assert!(s.scene.depth.depth.iter().all(|d| *d >= lo && *d <= hi));
        }
    }

    #[test]
    fn impossible_range_exhausts_retries() {
        let spec = SceneSpec {
            depth_range: (0.1, 0.2),
            ..SceneSpec::toy(Layout::TexturedPlanes)
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn reference_points_reproject_onto_the_same_surface_point() {
        let spec = SceneSpec::toy(Layout::TexturedPlanes);
        let s = generate_scene(&spec, 5).unwrap().scene;
        let k = spec.intrinsics().unwrap();
        for view in 1..s.images.len() {
            let pose = s.relative_pose(view);
            let world = pose.inverse();
            for (y, x) in [(3, 4), (16, 16), (28, 10)] {
                let d = s.depth.get(x, y).unwrap();
                let p = project_pixel(x as f64, y as f64, d, &k, &pose);
                // cast the paired ray through the projected position
                let dir = world.rotation
                    * Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0);
                let point = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0) * d;
                let along = (point - world.translation).cross(&dir).norm() / dir.norm();
                assert!(along < 1e-9, "view {view} pixel {x},{y}: {along}");
            }
        }
    }

    #[test]
    fn layouts_parse() {
        assert_eq!(Layout::parse("planes").unwrap(), Layout::TexturedPlanes);
        assert_eq!(Layout::parse("box-room").unwrap(), Layout::BoxRoom);
        assert!(Layout::parse("teapot").is_err());
    }
}
