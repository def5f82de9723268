//! Deterministic scene simulator: analytic SDF objects on scripted
//! trajectories, sphere-traced depth, label masks, shaded color, synthetic
//! point tracks and candidate keypoints, written in the sequence format.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{so3_exp, CameraModel, Pose};
use crate::keypoints::Candidate;
use crate::sequence::{self, Manifest, PoseRow, SequenceError, TrackRecord};
use crate::tsdf::{TsdfError, TsdfVolume};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error("query of track {track} at frame {frame} is {distance:.2e} m off the surface")]
    OffSurface { track: usize, frame: usize, distance: f64 },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Mesh(#[from] TsdfError),
}

type Result<T> = std::result::Result<T, SimError>;

const TRACE_STEPS: usize = 256;
const HIT_EPSILON: f64 = 1e-4;
const FAR_PLANE: f64 = 5.0;
/// Maximum distance of a query point from the analytic surface.
const SURFACE_TOLERANCE: f64 = 1e-3;

// ---------------------------------------------------------------------------
// shapes

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Axis along local y.
    Cylinder { radius: f64, half_height: f64 },
    Union { parts: Vec<Part> },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Part {
    pub shape: Shape,
    #[serde(default)]
    pub offset: [f64; 3],
    /// Axis-angle, radians.
    #[serde(default)]
    pub rotation: [f64; 3],
    /// Textureless surface: tracks attached here stick to their query pixel.
    #[serde(default)]
    pub alias: bool,
}

impl Part {
    fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Pose::from_axis_angle(self.rotation.into(), self.offset.into())
            .inverse()
            .transform_point(p)
    }
}

impl Shape {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half_extents } => {
                let q = p.abs() - Vector3::from(*half_extents);
                q.sup(&Vector3::zeros()).norm() + q.max().min(0.0)
            }
            Shape::Cylinder { radius, half_height } => {
                let d = Vector2::new(Vector2::new(p.x, p.z).norm() - radius, p.y.abs() - half_height);
                d.x.max(d.y).min(0.0) + d.sup(&Vector2::zeros()).norm()
            }
            Shape::Union { parts } => parts
                .iter()
                .map(|part| part.shape.sdf(&part.local(p)))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Radius of a sphere about the origin enclosing the shape.
    pub fn bound_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents } => Vector3::from(*half_extents).norm(),
            Shape::Cylinder { radius, half_height } => radius.hypot(*half_height),
            Shape::Union { parts } => parts
                .iter()
                .map(|p| Vector3::from(p.offset).norm() + p.shape.bound_radius())
                .fold(0.0, f64::max),
        }
    }

    /// Whether the surface nearest to `p` belongs to an alias part.
    pub fn is_alias_at(&self, p: &Vector3<f64>) -> bool {
        match self {
            Shape::Union { parts } => {
                let mut best = (f64::INFINITY, false);
                for part in parts {
                    let local = part.local(p);
                    let d = part.shape.sdf(&local).abs();
                    if d < best.0 {
                        best = (d, part.alias || part.shape.is_alias_at(&local));
                    }
                }
                best.1
            }
            _ => false,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let ok = match self {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            Shape::Cylinder { radius, half_height } => *radius > 0.0 && *half_height > 0.0,
            Shape::Union { parts } => {
                for p in parts {
                    p.shape.validate()?;
                }
                !parts.is_empty()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("shape has non-positive size: {self:?}"))
        }
    }
}

// ---------------------------------------------------------------------------
// scene description

#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    #[default]
    Static,
    Linear,
    Circular,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// m/s, linear only.
    pub velocity: [f64; 3],
    /// Circular only: the object center orbits `center` about `axis`.
    pub center: [f64; 3],
    pub axis: [f64; 3],
    /// rad/s.
    pub rate: f64,
    /// Rotation of the object about its own center.
    pub spin_axis: [f64; 3],
    pub spin_rate: f64,
    /// Motion stops after this many seconds.
    pub duration: Option<f64>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Static,
            velocity: [0.0; 3],
            center: [0.0; 3],
            axis: [0.0, 1.0, 0.0],
            rate: 0.0,
            spin_axis: [0.0, 1.0, 0.0],
            spin_rate: 0.0,
            duration: None,
        }
    }
}

fn default_scale() -> f64 {
    1.0
}
fn default_color() -> [u8; 3] {
    [200, 180, 160]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: usize,
    pub shape: Shape,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Initial shape center in the camera frame.
    pub position: [f64; 3],
    /// Initial axis-angle orientation.
    #[serde(default)]
    pub orientation: [f64; 3],
    #[serde(default = "default_color")]
    pub color: [u8; 3],
    #[serde(default)]
    pub trajectory: TrajectorySpec,
}

impl ObjectSpec {
    fn shape_sdf(&self, p_shape: &Vector3<f64>) -> f64 {
        self.scale * self.shape.sdf(&(p_shape / self.scale))
    }

    pub fn bound_radius(&self) -> f64 {
        self.scale * self.shape.bound_radius()
    }

    /// Shape-to-camera pose at time `s` seconds.
    pub fn shape_pose(&self, s: f64) -> Pose {
        let tr = &self.trajectory;
        let s = tr.duration.map_or(s, |d| s.min(d));
        let p0 = Vector3::from(self.position);
        let center = match tr.kind {
            TrajectoryKind::Static => p0,
            TrajectoryKind::Linear => p0 + Vector3::from(tr.velocity) * s,
            TrajectoryKind::Circular => {
                let c = Vector3::from(tr.center);
                c + so3_exp(&(unit(tr.axis) * tr.rate * s)) * (p0 - c)
            }
        };
        let spin = so3_exp(&(unit(tr.spin_axis) * tr.spin_rate * s));
        Pose::new(spin * so3_exp(&Vector3::from(self.orientation)), center)
    }
}

fn unit(v: [f64; 3]) -> Vector3<f64> {
    let v = Vector3::from(v);
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionMode {
    /// An occluder plane covers the object.
    Full,
    /// The object is removed from the image.
    OutOfView,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSpec {
    pub object: usize,
    /// Inclusive frame interval.
    pub start: usize,
    pub end: usize,
    pub mode: OcclusionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    #[default]
    StaticStick,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub track_sigma_px: f64,
    pub depth_sigma: f64,
    /// Scale the depth noise with depth.
    pub depth_proportional: bool,
    pub outlier_rate: f64,
    pub outlier_mode: OutlierMode,
    pub random_walk_sigma_px: f64,
    /// Reported uncertainty is `err / scale + baseline`, clamped to [0, 1].
    pub uncertainty_scale_px: f64,
    pub uncertainty_baseline: f64,
    /// Reported uncertainty of tracks on alias surfaces.
    pub alias_uncertainty: f64,
    /// Depth agreement required for a tracked point to count as visible.
    pub visibility_tolerance: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            track_sigma_px: 0.5,
            depth_sigma: 0.001,
            depth_proportional: false,
            outlier_rate: 0.1,
            outlier_mode: OutlierMode::StaticStick,
            random_walk_sigma_px: 1.5,
            uncertainty_scale_px: 5.0,
            uncertainty_baseline: 0.05,
            alias_uncertainty: 0.35,
            visibility_tolerance: 0.004,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn uncertainty(&self, pixel_error: f64) -> f64 {
        ((pixel_error / self.uncertainty_scale_px).clamp(0.0, 1.0) + self.uncertainty_baseline).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateSpec {
    /// Candidate frames are multiples of this.
    pub stride: usize,
    /// One candidate per cell of this many pixels square.
    pub cell: usize,
    /// Pixels whose neighbourhood of this radius leaves the mask are skipped.
    pub boundary_margin: usize,
    pub max_per_object: usize,
    /// Second-order depth variation (m) at which the score reaches 0.5.
    pub score_half: f64,
}

impl Default for CandidateSpec {
    fn default() -> Self {
        Self {
            stride: 5,
            cell: 8,
            boundary_margin: 2,
            max_per_object: 80,
            score_half: 0.001,
        }
    }
}

fn default_fps() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub camera: CameraSpec,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub occlusions: Vec<OcclusionSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub candidates: CandidateSpec,
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let scene: SceneSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SimError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|msg| SimError::Config { path: path.display().to_string(), msg })
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.frames == 0 || !(self.fps > 0.0) {
            return Err("frames and fps must be positive".into());
        }
        self.camera_model().map_err(|e| e.to_string())?;
        if self.objects.is_empty() {
            return Err("scene has no objects".into());
        }
        let mut ids: Vec<usize> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) || ids.iter().any(|&i| i >= 255) {
            return Err("object ids must be unique and below 255".into());
        }
        for o in &self.objects {
            o.shape.validate()?;
            if !(o.scale > 0.0) {
                return Err(format!("object {} has non-positive scale", o.id));
            }
            if o.trajectory.duration.is_some_and(|d| !(d > 0.0)) {
                return Err(format!("object {} has non-positive trajectory duration", o.id));
            }
        }
        for oc in &self.occlusions {
            if !ids.contains(&oc.object) || oc.end < oc.start {
                return Err(format!("bad occlusion entry {oc:?}"));
            }
        }
        let n = &self.noise;
        let rates_ok = [n.outlier_rate, n.uncertainty_baseline, n.alias_uncertainty].iter().all(|r| (0.0..=1.0).contains(r));
        if !rates_ok || n.track_sigma_px < 0.0 || n.depth_sigma < 0.0 || !(n.uncertainty_scale_px > 0.0) {
            return Err("noise parameters out of range".into());
        }
        let c = &self.candidates;
        if c.stride == 0 || c.cell == 0 || !(c.score_half > 0.0) {
            return Err("candidate stride, cell and score_half must be positive".into());
        }
        Ok(())
    }

    pub fn camera_model(&self) -> std::result::Result<CameraModel, crate::geometry::GeometryError> {
        let c = &self.camera;
        CameraModel::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    }

    fn camera(&self) -> CameraModel {
        self.camera_model().expect("validated camera")
    }

    pub fn time(&self, t: usize) -> f64 {
        t as f64 / self.fps
    }

    pub fn object(&self, id: usize) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Ground-truth object pose: frame `t` relative to the camera-aligned
    /// object frame of frame 0.
    pub fn gt_pose(&self, object: &ObjectSpec, t: usize) -> Pose {
        object.shape_pose(self.time(t)).compose(&object.shape_pose(0.0).inverse())
    }

    pub fn occlusion_at(&self, object: usize, t: usize) -> Option<OcclusionMode> {
        self.occlusions
            .iter()
            .find(|o| o.object == object && (o.start..=o.end).contains(&t))
            .map(|o| o.mode)
    }

    /// Signed distance to the object's surface in its frame-0 object frame.
    pub fn object_frame_sdf(&self, object: &ObjectSpec, p: &Vector3<f64>) -> f64 {
        object.shape_sdf(&object.shape_pose(0.0).inverse().transform_point(p))
    }
}

// ---------------------------------------------------------------------------
// rendering

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    /// z-depth, 0 where no surface was hit.
    pub depth: Vec<f32>,
    /// Object id + 1, 0 for background.
    pub labels: Vec<u8>,
    pub color: Vec<[u8; 3]>,
}

impl RenderedFrame {
    pub fn mask_of(&self, id: usize) -> Vec<bool> {
        let l = (id + 1) as u8;
        self.labels.iter().map(|&v| v == l).collect()
    }
}

fn ray_direction(cam: &CameraModel, col: usize, row: usize) -> Vector3<f64> {
    Vector3::new((col as f64 - cam.cx) / cam.fx, (row as f64 - cam.cy) / cam.fy, 1.0).normalize()
}

/// Distance along `dir` to the first hit of `f`, searched within `[t0, t1]`.
fn trace<F: Fn(&Vector3<f64>) -> f64>(f: &F, dir: &Vector3<f64>, t0: f64, t1: f64) -> Option<f64> {
    let mut t = t0;
    let mut hit = false;
    for _ in 0..TRACE_STEPS {
        let d = f(&(dir * t));
        if d < HIT_EPSILON {
            hit = true;
            break;
        }
        t += d;
        if t > t1 {
            return None;
        }
    }
    if !hit {
        return None;
    }
    // Newton along the ray tightens the hit well below the trace epsilon.
    let h = 1e-6;
    for _ in 0..8 {
        let v = f(&(dir * t));
        let slope = (f(&(dir * (t + h))) - f(&(dir * (t - h)))) / (2.0 * h);
        if slope.abs() < 1e-3 {
            break;
        }
        let step = (v / slope).clamp(-2.0 * HIT_EPSILON, 2.0 * HIT_EPSILON);
        let next = t - step;
        if f(&(dir * next)).abs() >= v.abs() {
            break;
        }
        t = next;
        if step.abs() < 1e-12 {
            break;
        }
    }
    Some(t)
}

fn ray_sphere(dir: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<(f64, f64)> {
    let b = dir.dot(c);
    let disc = b * b - (c.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some(((b - s).max(0.0), b + s))
}

fn sdf_gradient<F: Fn(&Vector3<f64>) -> f64>(f: &F, p: &Vector3<f64>) -> Vector3<f64> {
    let h = 1e-5;
    Vector3::new(
        f(&(p + Vector3::x() * h)) - f(&(p - Vector3::x() * h)),
        f(&(p + Vector3::y() * h)) - f(&(p - Vector3::y() * h)),
        f(&(p + Vector3::z() * h)) - f(&(p - Vector3::z() * h)),
    ) / (2.0 * h)
}

/// Noise-free render of frame `t` with the occlusion script applied.
pub fn render_depth(scene: &SceneSpec, t: usize) -> RenderedFrame {
    let cam = scene.camera();
    let s = scene.time(t);
    let placed: Vec<(&ObjectSpec, Pose, Pose)> = scene
        .objects
        .iter()
        .filter(|o| scene.occlusion_at(o.id, t) != Some(OcclusionMode::OutOfView))
        .map(|o| {
            let p = o.shape_pose(s);
            (o, p, p.inverse())
        })
        .collect();

    let pixels: Vec<(f32, u8, [u8; 3])> = (0..cam.pixel_count())
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / cam.width, idx % cam.width);
            let dir = ray_direction(&cam, col, row);
            let mut best: Option<(f64, usize)> = None;
            for (k, (o, pose, inv)) in placed.iter().enumerate() {
                let Some((t0, t1)) = ray_sphere(&dir, &pose.translation, o.bound_radius() * 1.01 + 1e-3) else {
                    continue;
                };
                if t0 > FAR_PLANE || best.is_some_and(|(bt, _)| bt < t0) {
                    continue;
                }
                let f = |x: &Vector3<f64>| o.shape_sdf(&inv.transform_point(x));
                if let Some(hit) = trace(&f, &dir, t0, t1.min(FAR_PLANE)) {
                    if best.map_or(true, |(bt, _)| hit < bt) {
                        best = Some((hit, k));
                    }
                }
            }
            match best {
                None => (0.0, 0, [0, 0, 0]),
                Some((hit, k)) => {
                    let (o, _, inv) = &placed[k];
                    let f = |x: &Vector3<f64>| o.shape_sdf(&inv.transform_point(x));
                    let n = sdf_gradient(&f, &(dir * hit)).normalize();
                    let shade = 0.3 + 0.7 * (-n.dot(&dir)).max(0.0);
                    let c = o.color.map(|v| (v as f64 * shade).round().clamp(0.0, 255.0) as u8);
                    ((hit * dir.z) as f32, (o.id + 1) as u8, c)
                }
            }
        })
        .collect();

    let mut frame = RenderedFrame {
        depth: pixels.iter().map(|p| p.0).collect(),
        labels: pixels.iter().map(|p| p.1).collect(),
        color: pixels.iter().map(|p| p.2).collect(),
    };
    for o in &scene.objects {
        if scene.occlusion_at(o.id, t) == Some(OcclusionMode::Full) {
            let l = (o.id + 1) as u8;
            let covered: Vec<usize> = (0..frame.labels.len()).filter(|&i| frame.labels[i] == l).collect();
            let nearest = covered.iter().map(|&i| frame.depth[i]).fold(f32::INFINITY, f32::min);
            let plane = (nearest - 0.05).max(0.05);
            for i in covered {
                frame.labels[i] = 0;
                frame.depth[i] = plane;
                frame.color[i] = [60, 60, 60];
            }
        }
    }
    frame
}

/// Adds sensor noise to valid depth pixels.
pub fn noisy_depth(depth: &[f32], noise: &NoiseSpec, t: usize) -> Vec<f32> {
    if noise.depth_sigma == 0.0 {
        return depth.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x5eed_de97);
    rng.set_stream(t as u64);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    depth
        .iter()
        .map(|&d| {
            let e: f64 = unit.sample(&mut rng);
            if d > 0.0 {
                let sigma = if noise.depth_proportional { noise.depth_sigma * d as f64 } else { noise.depth_sigma };
                ((d as f64 + e * sigma).max(1e-3)) as f32
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// candidate keypoints

/// Candidate pixels on an object mask. Scores grow with the second-order
/// depth variation, so creases and corners outrank planar faces at any slant.
pub fn candidate_scores(
    mask: &[bool],
    depth: &[f32],
    width: usize,
    height: usize,
    spec: &CandidateSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<Candidate> {
    let m = spec.boundary_margin.max(1);
    let inside = |c: usize, r: usize| -> bool {
        if c < m || r < m || c + m >= width || r + m >= height {
            return false;
        }
        for rr in r - m..=r + m {
            for cc in c - m..=c + m {
                let i = rr * width + cc;
                if !mask[i] || depth[i] <= 0.0 {
                    return false;
                }
            }
        }
        true
    };
    let d = |c: usize, r: usize| depth[r * width + c] as f64;
    let mut out: Vec<Candidate> = Vec::new();
    for cell_r in (0..height).step_by(spec.cell) {
        for cell_c in (0..width).step_by(spec.cell) {
            let mut best: Option<(f64, usize, usize)> = None;
            for r in cell_r..(cell_r + spec.cell).min(height) {
                for c in cell_c..(cell_c + spec.cell).min(width) {
                    if !inside(c, r) {
                        continue;
                    }
                    let dxx = d(c - 1, r) - 2.0 * d(c, r) + d(c + 1, r);
                    let dyy = d(c, r - 1) - 2.0 * d(c, r) + d(c, r + 1);
                    let dxy = 0.25 * (d(c + 1, r + 1) - d(c + 1, r - 1) - d(c - 1, r + 1) + d(c - 1, r - 1));
                    let h = dxx.abs() + dyy.abs() + 2.0 * dxy.abs();
                    if best.map_or(true, |(bh, _, _)| h > bh) {
                        best = Some((h, c, r));
                    }
                }
            }
            if let Some((h, c, r)) = best {
                let jitter: f64 = rng.gen_range(0.0..1e-3);
                let score = (h / (h + spec.score_half) + jitter).min(1.0);
                out.push(Candidate { pixel: Vector2::new(c as f64, r as f64), score });
            }
        }
    }
    if out.len() > spec.max_per_object {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| out[b].score.total_cmp(&out[a].score).then(a.cmp(&b)));
        order.truncate(spec.max_per_object);
        order.sort_unstable();
        out = order.into_iter().map(|i| out[i]).collect();
    }
    out
}

// ---------------------------------------------------------------------------
// point tracks

/// A track query: a pixel on an object at its query frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub track_id: usize,
    pub object_id: usize,
    pub frame: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone)]
struct TrackState {
    query: Query,
    /// Attached surface point in the frame-0 object frame.
    point: Vector3<f64>,
    outlier: bool,
    alias: bool,
    last: Vector2<f64>,
    rng: ChaCha8Rng,
}

/// Streams track records frame by frame so frames need not be kept.
pub struct TrackSynth<'a> {
    scene: &'a SceneSpec,
    cam: CameraModel,
    tracks: Vec<TrackState>,
}

impl<'a> TrackSynth<'a> {
    pub fn new(scene: &'a SceneSpec) -> Self {
        Self { scene, cam: scene.camera(), tracks: Vec::new() }
    }

    /// Attaches a query to the surface seen in `frame` (the clean render of
    /// the query frame).
    pub fn add_query(&mut self, q: Query, frame: &RenderedFrame) -> Result<()> {
        let noise = &self.scene.noise;
        let obj = self
            .scene
            .object(q.object_id)
            .ok_or_else(|| SimError::InvalidScene(format!("query on unknown object {}", q.object_id)))?;
        let off = |distance| SimError::OffSurface { track: q.track_id, frame: q.frame, distance };
        let (c, r) = self.cam.nearest_pixel(&q.pixel).ok_or_else(|| off(f64::INFINITY))?;
        let z = frame.depth[r * self.cam.width + c] as f64;
        let cam_point = self.cam.back_project(&q.pixel, z).map_err(|_| off(f64::INFINITY))?;
        let point = self.scene.gt_pose(obj, q.frame).inverse().transform_point(&cam_point);
        let dist = self.scene.object_frame_sdf(obj, &point);
        if dist.abs() > SURFACE_TOLERANCE {
            return Err(off(dist));
        }
        let shape_point = obj.shape_pose(0.0).inverse().transform_point(&point) / obj.scale;
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        rng.set_stream(q.track_id as u64 + 1);
        let outlier = rng.gen::<f64>() < noise.outlier_rate;
        self.tracks.push(TrackState {
            query: q,
            point,
            outlier,
            alias: obj.shape.is_alias_at(&shape_point),
            last: q.pixel,
            rng,
        });
        Ok(())
    }

    /// Records of every track whose query frame is at or before `t`.
    pub fn step(&mut self, t: usize, frame: &RenderedFrame) -> Vec<TrackRecord> {
        let scene = self.scene;
        let noise = &scene.noise;
        let cam = self.cam;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = Vec::new();
        for tr in self.tracks.iter_mut().filter(|tr| tr.query.frame <= t) {
            let obj = scene.object(tr.query.object_id).expect("validated object");
            let p = scene.gt_pose(obj, t).transform_point(&tr.point);
            let truth = if p.z > 1e-6 { cam.project(&p).ok() } else { None };
            let draws = Vector2::new(unit.sample(&mut tr.rng), unit.sample(&mut tr.rng));
            let reported = if t == tr.query.frame {
                tr.query.pixel
            } else if tr.alias || (tr.outlier && noise.outlier_mode == OutlierMode::StaticStick) {
                tr.query.pixel
            } else if tr.outlier {
                tr.last + draws * noise.random_walk_sigma_px
            } else {
                truth.map_or(tr.last, |uv| uv + draws * noise.track_sigma_px)
            };
            tr.last = reported;
            let label = (obj.id + 1) as u8;
            let scripted = scene.occlusion_at(obj.id, t).is_some();
            // An alias track sees the same texture wherever it sits on the
            // object, so it claims visibility from its reported pixel.
            let visible = !scripted
                && if tr.alias {
                    cam.nearest_pixel(&reported).is_some_and(|(c, r)| frame.labels[r * cam.width + c] == label)
                } else {
                    truth.is_some_and(|uv| {
                        let Some((c, r)) = cam.nearest_pixel(&uv) else { return false };
                        let i = r * cam.width + c;
                        frame.labels[i] == label && (frame.depth[i] as f64 - p.z).abs() <= noise.visibility_tolerance
                    })
                };
            let uncertainty = if tr.alias {
                noise.alias_uncertainty
            } else {
                truth.map_or(1.0, |uv| noise.uncertainty((reported - uv).norm()))
            };
            out.push(TrackRecord {
                frame: t,
                track_id: tr.query.track_id,
                object_id: obj.id,
                u: reported.x,
                v: reported.y,
                visible,
                uncertainty,
            });
        }
        out
    }

    /// Ground-truth pixel of a track at frame `t`, if in front of the camera.
    pub fn true_pixel(&self, track_id: usize, t: usize) -> Option<Vector2<f64>> {
        let tr = self.tracks.iter().find(|tr| tr.query.track_id == track_id)?;
        let obj = self.scene.object(tr.query.object_id)?;
        let p = self.scene.gt_pose(obj, t).transform_point(&tr.point);
        if p.z <= 1e-6 {
            return None;
        }
        self.cam.project(&p).ok()
    }

    pub fn is_outlier(&self, track_id: usize) -> bool {
        self.tracks.iter().any(|tr| tr.query.track_id == track_id && (tr.outlier || tr.alias))
    }
}

/// Synthesizes records for a fixed query schedule over the whole scene.
pub fn synthesize_tracks(scene: &SceneSpec, queries: &[Query]) -> Result<Vec<TrackRecord>> {
    let mut synth = TrackSynth::new(scene);
    let mut records = Vec::new();
    for t in 0..scene.frames {
        let frame = render_depth(scene, t);
        for q in queries.iter().filter(|q| q.frame == t) {
            synth.add_query(*q, &frame)?;
        }
        records.extend(synth.step(t, &frame));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// sequence writer

/// Marching-cubes mesh of an object's analytic surface in its frame-0
/// object frame.
pub fn ground_truth_mesh(scene: &SceneSpec, object: &ObjectSpec) -> Result<crate::tsdf::TriangleMesh> {
    let r = object.bound_radius();
    let voxel = (2.0 * r / 150.0).max(0.0015);
    let pad = 4.0 * voxel;
    let center = object.shape_pose(0.0).translation;
    let n = ((2.0 * (r + pad)) / voxel).ceil() as usize + 1;
    let origin = center.add_scalar(-(r + pad));
    let vol = TsdfVolume::from_sdf(origin, voxel, [n, n, n], 3.0 * voxel, |p| scene.object_frame_sdf(object, p))?;
    Ok(vol.extract_mesh())
}

pub fn manifest(scene: &SceneSpec) -> Manifest {
    Manifest {
        frames: scene.frames,
        camera: scene.camera(),
        object_ids: scene.objects.iter().map(|o| o.id).collect(),
    }
}

fn io_context(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Sequence(SequenceError::Io { path: path.to_path_buf(), source })
}

/// Writes a complete sequence directory: images, candidates at every
/// `stride`-th frame with a track per candidate, ground-truth poses and
/// meshes. Output is byte-identical for identical scenes.
pub fn write_sequence(scene: &SceneSpec, out: &Path) -> Result<Manifest> {
    scene.validate().map_err(SimError::InvalidScene)?;
    fs::create_dir_all(out).map_err(io_context(out))?;
    let manifest = manifest(scene);
    manifest.write(out)?;
    let cam = scene.camera();

    let mut synth = TrackSynth::new(scene);
    let mut records = Vec::new();
    let mut gt_rows = Vec::new();
    let mut next_track = 0usize;

    for t in 0..scene.frames {
        let frame = render_depth(scene, t);
        sequence::write_depth(&sequence::depth_path(out, t), &noisy_depth(&frame.depth, &scene.noise, t))?;
        sequence::write_mask(&sequence::mask_path(out, t), &frame.labels)?;
        sequence::write_color(&sequence::color_path(out, t), &frame.color)?;

        if t % scene.candidates.stride == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.noise.seed ^ 0xca7d_1da7);
            rng.set_stream(t as u64);
            let mut listed = Vec::new();
            for o in &scene.objects {
                let cands = candidate_scores(&frame.mask_of(o.id), &frame.depth, cam.width, cam.height, &scene.candidates, &mut rng);
                for c in cands {
                    synth.add_query(Query { track_id: next_track, object_id: o.id, frame: t, pixel: c.pixel }, &frame)?;
                    next_track += 1;
                    listed.push((o.id, c));
                }
            }
            sequence::write_candidates(&sequence::candidates_path(out, t), &listed)?;
        }
        records.extend(synth.step(t, &frame));
        for o in &scene.objects {
            gt_rows.push(PoseRow { frame: t, object_id: o.id, pose: scene.gt_pose(o, t) });
        }
    }
    sequence::write_tracks(&out.join("tracks.csv"), &records)?;
    sequence::write_poses(&out.join("gt_poses.csv"), &gt_rows)?;
    for o in &scene.objects {
        ground_truth_mesh(scene, o)?.write_obj(&sequence::gt_mesh_path(out, o.id))?;
    }
    Ok(manifest)
}
