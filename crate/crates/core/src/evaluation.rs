//! Pose and reconstruction metrics: ADD, ADD-S, AUC and Chamfer distance.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use parry3d_f64::math::Vector as PVec;
use parry3d_f64::query::PointQuery;
use parry3d_f64::shape::TriMesh;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Pose;
use crate::pipeline;
use crate::sequence::{self, Manifest, SequenceError};
use crate::tsdf::{TriangleMesh, TsdfError};

pub const DEFAULT_MAX_THRESHOLD: f64 = 0.1;
pub const MODEL_POINTS: usize = 2048;
pub const CHAMFER_SAMPLES: usize = 4096;
const MODEL_SEED: u64 = 0x6d6f_6465;
const CHAMFER_SEED: u64 = 0xc4a3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model point set is empty")]
    EmptyModel,
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Mesh(#[from] TsdfError),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Mean distance between corresponding model points under the two poses.
pub fn add_error(model: &[Vector3<f64>], est: &Pose, gt: &Pose) -> Result<f64> {
    if model.is_empty() {
        return Err(EvalError::EmptyModel);
    }
    let sum: f64 = model.iter().map(|p| (est.transform_point(p) - gt.transform_point(p)).norm()).sum();
    Ok(sum / model.len() as f64)
}

/// Mean distance from each estimated point to the closest ground-truth point.
pub fn adds_error(model: &[Vector3<f64>], est: &Pose, gt: &Pose) -> Result<f64> {
    if model.is_empty() {
        return Err(EvalError::EmptyModel);
    }
    let target: Vec<Vector3<f64>> = model.iter().map(|p| gt.transform_point(p)).collect();
    let sum: f64 = model
        .par_iter()
        .map(|p| {
            let q = est.transform_point(p);
            target.iter().map(|t| (q - t).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
        })
        .sum();
    Ok(sum / model.len() as f64)
}

/// Area under the accuracy-threshold curve on [0, max], in percent.
///
/// Accuracy at threshold s is the fraction of errors strictly below s, so
/// each error e contributes (max - min(e, max)) / max to the mean.
pub fn auc(errors: &[f64], max_threshold: f64) -> f64 {
    if errors.is_empty() || !(max_threshold > 0.0) {
        return 0.0;
    }
    let mut sorted: Vec<f64> = errors.iter().map(|e| if e.is_nan() { f64::INFINITY } else { e.max(0.0) }).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // Integrate the step function piecewise between consecutive errors.
    let mut area = 0.0;
    let mut prev = 0.0;
    for (i, &e) in sorted.iter().enumerate() {
        let e = e.min(max_threshold);
        area += (e - prev) * i as f64 / n;
        prev = e;
    }
    area += (max_threshold - prev) * 1.0;
    (area / max_threshold * 100.0).clamp(0.0, 100.0)
}

/// Area-uniform surface samples.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let areas: Vec<f64> = mesh.triangles.iter().map(|t| mesh.triangle_area(t)).collect();
    let dist = WeightedIndex::new(&areas).map_err(|_| EvalError::EmptyMesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let [a, b, c] = mesh.triangles[dist.sample(&mut rng)];
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            mesh.vertices[a] * (1.0 - s) + mesh.vertices[b] * (s * (1.0 - r2)) + mesh.vertices[c] * (s * r2)
        })
        .collect())
}

/// Model points for ADD/ADD-S: fixed-seed samples of the ground-truth surface.
pub fn model_points(mesh: &TriangleMesh) -> Result<Vec<Vector3<f64>>> {
    sample_surface(mesh, MODEL_POINTS, MODEL_SEED)
}

fn to_trimesh(mesh: &TriangleMesh) -> Result<TriMesh> {
    if mesh.triangles.is_empty() {
        return Err(EvalError::EmptyMesh);
    }
    let vertices = mesh.vertices.iter().map(|v| PVec::new(v.x, v.y, v.z)).collect();
    let indices = mesh.triangles.iter().map(|t| t.map(|i| i as u32)).collect();
    TriMesh::new(vertices, indices).map_err(|_| EvalError::EmptyMesh)
}

fn mean_distance_to(points: &[Vector3<f64>], surface: &TriMesh) -> f64 {
    let sum: f64 = points
        .par_iter()
        .map(|p| surface.distance_to_local_point(PVec::new(p.x, p.y, p.z), true))
        .sum();
    sum / points.len() as f64
}

/// Symmetric Chamfer distance: samples of each mesh measured against the
/// other's surface, averaged over both directions.
pub fn chamfer(a: &TriangleMesh, b: &TriangleMesh, samples: usize, seed: u64) -> Result<f64> {
    let (ta, tb) = (to_trimesh(a)?, to_trimesh(b)?);
    let samples = samples.max(1);
    let sa = sample_surface(a, samples, seed)?;
    let sb = sample_surface(b, samples, seed.wrapping_add(1))?;
    Ok(0.5 * (mean_distance_to(&sa, &tb) + mean_distance_to(&sb, &ta)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameError {
    pub frame: usize,
    pub add: f64,
    pub adds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectReport {
    pub object_id: usize,
    pub add_auc: f64,
    pub adds_auc: f64,
    pub mean_add: f64,
    pub mean_adds: f64,
    pub chamfer: Option<f64>,
    /// Frames that entered the AUC; fully occluded frames are left out.
    pub frames: Vec<FrameError>,
    pub excluded: usize,
    pub lost_intervals: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub max_threshold: f64,
    pub objects: Vec<ObjectReport>,
}

impl MetricReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AUC threshold {:.3} m", self.max_threshold);
        for o in &self.objects {
            let _ = writeln!(s, "object {}", o.object_id);
            let _ = writeln!(s, "  frames {} (excluded {})", o.frames.len(), o.excluded);
            let _ = writeln!(s, "  ADD AUC {:.2}%  mean {:.6} m", o.add_auc, o.mean_add);
            let _ = writeln!(s, "  ADD-S AUC {:.2}%  mean {:.6} m", o.adds_auc, o.mean_adds);
            match o.chamfer {
                Some(c) => {
                    let _ = writeln!(s, "  chamfer {c:.6} m");
                }
                None => {
                    let _ = writeln!(s, "  chamfer n/a");
                }
            }
            let _ = writeln!(s, "  lost [{}]", format_intervals(&o.lost_intervals, ","));
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("object_id,frames,excluded,add_auc,adds_auc,mean_add,mean_adds,chamfer,lost_intervals\n");
        for o in &self.objects {
            let chamfer = o.chamfer.map_or(String::new(), |c| format!("{c:.6}"));
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.6},{:.6},{},{}",
                o.object_id,
                o.frames.len(),
                o.excluded,
                o.add_auc,
                o.adds_auc,
                o.mean_add,
                o.mean_adds,
                chamfer,
                format_intervals(&o.lost_intervals, ";")
            );
        }
        s
    }
}

fn format_intervals(v: &[(usize, usize)], sep: &str) -> String {
    v.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(sep)
}

/// Scores a tracker output directory against a simulator sequence directory.
pub fn evaluate_dirs(pred: &Path, gt: &Path, max_threshold: f64) -> Result<MetricReport> {
    let manifest = Manifest::read(gt)?;
    let gt_rows = sequence::read_poses(&gt.join("gt_poses.csv"))?;
    let lost = read_lost(pred)?;
    let n = manifest.pixels();

    // Visibility per frame from the ground-truth masks.
    let mut visible = vec![vec![false; manifest.object_ids.len()]; manifest.frames];
    for (t, row) in visible.iter_mut().enumerate() {
        let labels = sequence::read_mask(&sequence::mask_path(gt, t), t, n)?;
        for (k, &id) in manifest.object_ids.iter().enumerate() {
            let label = (id + 1) as u8;
            row[k] = labels.iter().any(|&l| l == label);
        }
    }

    let mut objects = Vec::new();
    for (k, &id) in manifest.object_ids.iter().enumerate() {
        let gt_mesh = TriangleMesh::read_obj(&sequence::gt_mesh_path(gt, id))?;
        let model = model_points(&gt_mesh)?;
        let pred_path = sequence::poses_path(pred, id);
        let est_rows = sequence::read_poses(&pred_path)?;
        let mut frames = Vec::new();
        let mut excluded = 0;
        for t in 0..manifest.frames {
            let gt_pose = gt_rows
                .iter()
                .find(|r| r.frame == t && r.object_id == id)
                .ok_or_else(|| invalid(&gt.join("gt_poses.csv"), format!("no pose for object {id} at frame {t}")))?;
            let est = est_rows
                .iter()
                .find(|r| r.frame == t && r.object_id == id)
                .ok_or_else(|| invalid(&pred_path, format!("no pose at frame {t}")))?;
            if !visible[t][k] {
                excluded += 1;
                continue;
            }
            frames.push(FrameError {
                frame: t,
                add: add_error(&model, &est.pose, &gt_pose.pose)?,
                adds: adds_error(&model, &est.pose, &gt_pose.pose)?,
            });
        }
        let adds: Vec<f64> = frames.iter().map(|f| f.add).collect();
        let addss: Vec<f64> = frames.iter().map(|f| f.adds).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let mesh_path = sequence::mesh_path(pred, id);
        let chamfer = if mesh_path.exists() {
            let mesh = TriangleMesh::read_obj(&mesh_path)?;
            if mesh.triangles.is_empty() {
                None
            } else {
                Some(chamfer(&mesh, &gt_mesh, CHAMFER_SAMPLES, CHAMFER_SEED)?)
            }
        } else {
            None
        };
        objects.push(ObjectReport {
            object_id: id,
            add_auc: auc(&adds, max_threshold),
            adds_auc: auc(&addss, max_threshold),
            mean_add: mean(&adds),
            mean_adds: mean(&addss),
            chamfer,
            frames,
            excluded,
            lost_intervals: lost.iter().find(|(o, _)| *o == id).map(|(_, v)| v.clone()).unwrap_or_default(),
        });
    }
    Ok(MetricReport { max_threshold, objects })
}

/// Writes report.txt and report.csv into `out`.
pub fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| EvalError::Io { path: out.to_path_buf(), source })?;
    for (name, body) in [("report.txt", report.render_text()), ("report.csv", report.render_csv())] {
        let path = out.join(name);
        fs::write(&path, body).map_err(|source| EvalError::Io { path, source })?;
    }
    Ok(())
}

fn invalid(path: &Path, msg: String) -> EvalError {
    EvalError::Invalid { path: path.to_path_buf(), msg }
}

/// Lost intervals from a tracker summary; a missing summary means none.
fn read_lost(pred: &Path) -> Result<Vec<(usize, Vec<(usize, usize)>)>> {
    let path = pred.join("summary.txt");
    match fs::read_to_string(&path) {
        Ok(text) => pipeline::parse_lost_intervals(&text).map_err(|msg| invalid(&path, msg)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(source) => Err(EvalError::Io { path, source }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_of_single_error() {
        assert!((auc(&[0.05], 0.1) - 50.0).abs() < 1e-12);
        assert!((auc(&[0.0, 0.2], 0.1) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_points_lie_on_triangle() {
        let mesh = TriangleMesh {
            vertices: vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            triangles: vec![[0, 1, 2]],
            colors: Vec::new(),
        };
        for p in sample_surface(&mesh, 200, 3).unwrap() {
            assert!(p.z.abs() < 1e-15 && p.x >= 0.0 && p.y >= 0.0 && p.x + p.y <= 1.0 + 1e-12);
        }
    }
}
