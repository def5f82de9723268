//! On-disk sequence format shared by the simulator, tracker and evaluator.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{CameraModel, Pose};
use crate::keypoints::Candidate;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing file")]
    Missing { path: PathBuf },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("frame {frame}: {path} holds {got} bytes, expected {expected}")]
    Truncated {
        path: PathBuf,
        frame: usize,
        expected: usize,
        got: usize,
    },
}

type Result<T> = std::result::Result<T, SequenceError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SequenceError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            SequenceError::Missing { path: path.to_path_buf() }
        } else {
            SequenceError::Io { path: path.to_path_buf(), source }
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> SequenceError {
    SequenceError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

pub fn depth_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("depth_{t:06}.bin"))
}
pub fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("mask_{t:06}.bin"))
}
pub fn color_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("color_{t:06}.bin"))
}
pub fn candidates_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("candidates_{t:06}.csv"))
}
pub fn poses_path(dir: &Path, object_id: usize) -> PathBuf {
    dir.join(format!("poses_obj{object_id}.csv"))
}
pub fn mesh_path(dir: &Path, object_id: usize) -> PathBuf {
    dir.join(format!("mesh_obj{object_id}.obj"))
}
pub fn gt_mesh_path(dir: &Path, object_id: usize) -> PathBuf {
    dir.join(format!("gt_mesh_obj{object_id}.obj"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub frames: usize,
    pub camera: CameraModel,
    pub object_ids: Vec<usize>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn write(&self, dir: &Path) -> Result<()> {
        let c = &self.camera;
        let ids: Vec<String> = self.object_ids.iter().map(|i| i.to_string()).collect();
        let text = format!(
            "frames={}\nwidth={}\nheight={}\nfx={}\nfy={}\ncx={}\ncy={}\nobject_count={}\nobject_ids={}\n",
            self.frames,
            c.width,
            c.height,
            c.fx,
            c.fy,
            c.cx,
            c.cy,
            self.object_ids.len(),
            ids.join(",")
        );
        let path = dir.join(Self::FILE);
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(&path, i + 1, "expected key=value"))?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| parse_err(&path, 0, format!("missing key `{k}`")));
        fn num<T: std::str::FromStr>(path: &Path, (line, v): &(usize, String), k: &str) -> Result<T> {
            v.parse().map_err(|_| parse_err(path, *line, format!("bad value for `{k}`: {v}")))
        }
        let frames: usize = num(&path, get("frames")?, "frames")?;
        let width: usize = num(&path, get("width")?, "width")?;
        let height: usize = num(&path, get("height")?, "height")?;
        let fx: f64 = num(&path, get("fx")?, "fx")?;
        let fy: f64 = num(&path, get("fy")?, "fy")?;
        let cx: f64 = num(&path, get("cx")?, "cx")?;
        let cy: f64 = num(&path, get("cy")?, "cy")?;
        let count: usize = num(&path, get("object_count")?, "object_count")?;
        let (line, ids) = get("object_ids")?;
        let object_ids = if ids.is_empty() {
            Vec::new()
        } else {
            ids.split(',')
                .map(|s| s.trim().parse().map_err(|_| parse_err(&path, *line, format!("bad object id `{s}`"))))
                .collect::<Result<Vec<usize>>>()?
        };
        if object_ids.len() != count {
            return Err(parse_err(&path, *line, "object_count disagrees with object_ids"));
        }
        if object_ids.iter().any(|&i| i >= 255) {
            return Err(parse_err(&path, *line, "object ids must be below 255"));
        }
        let camera = CameraModel::new(fx, fy, cx, cy, width, height)
            .map_err(|e| parse_err(&path, 0, e.to_string()))?;
        Ok(Manifest { frames, camera, object_ids })
    }

    pub fn pixels(&self) -> usize {
        self.camera.pixel_count()
    }
}

fn read_exact_len(path: &Path, frame: usize, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(SequenceError::Truncated {
            path: path.to_path_buf(),
            frame,
            expected,
            got: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn write_depth(path: &Path, depth: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = depth.iter().flat_map(|d| d.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_depth(path: &Path, frame: usize, pixels: usize) -> Result<Vec<f32>> {
    let bytes = read_exact_len(path, frame, pixels * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Label image: object id + 1, 0 for background.
pub fn write_mask(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, labels).map_err(io_err(path))
}

pub fn read_mask(path: &Path, frame: usize, pixels: usize) -> Result<Vec<u8>> {
    read_exact_len(path, frame, pixels)
}

pub fn write_color(path: &Path, color: &[[u8; 3]]) -> Result<()> {
    let bytes: Vec<u8> = color.iter().flatten().copied().collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_color(path: &Path, frame: usize, pixels: usize) -> Result<Vec<[u8; 3]>> {
    let bytes = read_exact_len(path, frame, pixels * 3)?;
    Ok(bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub track_id: usize,
    pub object_id: usize,
    pub u: f64,
    pub v: f64,
    pub visible: bool,
    pub uncertainty: f64,
}

const TRACKS_HEADER: &str = "frame,track_id,object_id,u,v,visible,uncertainty";

fn csv_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(BufWriter::new(f))
}

fn csv_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
    let got = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if got.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(parse_err(path, 1, format!("expected header `{}`", header.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(path, i + 2, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        out.push((i + 2, rec));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, k: usize) -> Result<T> {
    let s = rec[k].trim();
    s.parse().map_err(|_| parse_err(path, line, format!("bad field {}: `{s}`", k + 1)))
}

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{TRACKS_HEADER}")?;
        for r in records {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{},{:.6}",
                r.frame, r.track_id, r.object_id, r.u, r.v, r.visible as u8, r.uncertainty
            )?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let header: Vec<&str> = TRACKS_HEADER.split(',').collect();
    csv_rows(path, &header)?
        .into_iter()
        .map(|(line, rec)| {
            let visible: u8 = field(path, line, &rec, 5)?;
            if visible > 1 {
                return Err(parse_err(path, line, "visible must be 0 or 1"));
            }
            let uncertainty: f64 = field(path, line, &rec, 6)?;
            if !(0.0..=1.0).contains(&uncertainty) {
                return Err(parse_err(path, line, "uncertainty outside [0, 1]"));
            }
            Ok(TrackRecord {
                frame: field(path, line, &rec, 0)?,
                track_id: field(path, line, &rec, 1)?,
                object_id: field(path, line, &rec, 2)?,
                u: field(path, line, &rec, 3)?,
                v: field(path, line, &rec, 4)?,
                visible: visible == 1,
                uncertainty,
            })
        })
        .collect()
}

fn pose_header() -> Vec<String> {
    let mut h = vec!["frame".to_string(), "object_id".to_string()];
    for r in 0..4 {
        for c in 0..4 {
            h.push(format!("m{r}{c}"));
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRow {
    pub frame: usize,
    pub object_id: usize,
    pub pose: Pose,
}

/// Pose rows; entries use shortest round-trip formatting.
pub fn write_poses(path: &Path, rows: &[PoseRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{}", pose_header().join(","))?;
        for r in rows {
            let m: Vec<String> = r.pose.to_row_major().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", r.frame, r.object_id, m.join(","))?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseRow>> {
    let header = pose_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_rows(path, &header)?
        .into_iter()
        .map(|(line, rec)| {
            let m = (0..16).map(|k| field::<f64>(path, line, &rec, k + 2)).collect::<Result<Vec<_>>>()?;
            let pose = Pose::from_row_major(&m).map_err(|e| parse_err(path, line, e.to_string()))?;
            Ok(PoseRow {
                frame: field(path, line, &rec, 0)?,
                object_id: field(path, line, &rec, 1)?,
                pose,
            })
        })
        .collect()
}

const CANDIDATES_HEADER: &str = "object_id,u,v,score";

pub fn write_candidates(path: &Path, cands: &[(usize, Candidate)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{CANDIDATES_HEADER}")?;
        for (obj, c) in cands {
            writeln!(w, "{},{:.6},{:.6},{:.6}", obj, c.pixel.x, c.pixel.y, c.score)?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_candidates(path: &Path) -> Result<Vec<(usize, Candidate)>> {
    let header: Vec<&str> = CANDIDATES_HEADER.split(',').collect();
    csv_rows(path, &header)?
        .into_iter()
        .map(|(line, rec)| {
            let score: f64 = field(path, line, &rec, 3)?;
            if !(0.0..=1.0).contains(&score) {
                return Err(parse_err(path, line, "score outside [0, 1]"));
            }
            Ok((
                field(path, line, &rec, 0)?,
                Candidate {
                    pixel: nalgebra::Vector2::new(field(path, line, &rec, 1)?, field(path, line, &rec, 2)?),
                    score,
                },
            ))
        })
        .collect()
}

/// One frame of sensor input.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub index: usize,
    pub depth: Vec<f32>,
    pub labels: Vec<u8>,
    pub color: Option<Vec<[u8; 3]>>,
}

impl FrameData {
    pub fn mask_of(&self, object_id: usize) -> Vec<bool> {
        let l = (object_id + 1) as u8;
        self.labels.iter().map(|&v| v == l).collect()
    }
}

pub fn read_frame(dir: &Path, manifest: &Manifest, t: usize) -> Result<FrameData> {
    let n = manifest.pixels();
    let depth = read_depth(&depth_path(dir, t), t, n)?;
    let labels = read_mask(&mask_path(dir, t), t, n)?;
    let cpath = color_path(dir, t);
    let color = if cpath.exists() { Some(read_color(&cpath, t, n)?) } else { None };
    Ok(FrameData { index: t, depth, labels, color })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn manifest() -> Manifest {
        Manifest {
            frames: 3,
            camera: CameraModel::new(300.0, 301.5, 63.5, 47.25, 128, 96).unwrap(),
            object_ids: vec![0, 2],
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        manifest().write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), manifest());
    }

    #[test]
    fn missing_manifest_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = Manifest::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest.txt"), "{err}");
    }

    #[test]
    fn binary_images_round_trip_and_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let depth = vec![0.0f32, 1.25, 0.5, f32::MIN_POSITIVE];
        let p = depth_path(dir.path(), 7);
        write_depth(&p, &depth).unwrap();
        assert_eq!(read_depth(&p, 7, 4).unwrap(), depth);
        let err = read_depth(&p, 7, 5).unwrap_err();
        assert!(matches!(err, SequenceError::Truncated { frame: 7, .. }));
        assert!(err.to_string().contains("frame 7"));

        let cp = color_path(dir.path(), 0);
        let color = vec![[1u8, 2, 3], [250, 0, 9]];
        write_color(&cp, &color).unwrap();
        assert_eq!(read_color(&cp, 0, 2).unwrap(), color);
    }

    #[test]
    fn tracks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tracks.csv");
        let recs = vec![
            TrackRecord { frame: 0, track_id: 1, object_id: 0, u: 12.0, v: 40.0, visible: true, uncertainty: 0.05 },
            TrackRecord { frame: 1, track_id: 1, object_id: 0, u: 12.25, v: 40.5, visible: false, uncertainty: 1.0 },
        ];
        write_tracks(&p, &recs).unwrap();
        assert_eq!(read_tracks(&p).unwrap(), recs);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("frame,track_id,object_id,u,v,visible,uncertainty\n"));
        assert!(text.contains("12.250000,40.500000,0,1.000000"));
    }

    #[test]
    fn poses_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt_poses.csv");
        let rows: Vec<_> = (0..5)
            .map(|t| PoseRow {
                frame: t,
                object_id: 1,
                pose: Pose::from_axis_angle(Vector3::new(0.1 * t as f64, 0.3, -0.2), Vector3::new(0.01, 1.0 / 3.0, 0.7)),
            })
            .collect();
        write_poses(&p, &rows).unwrap();
        assert_eq!(read_poses(&p).unwrap(), rows);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tracks.csv");
        fs::write(&p, "frame,track_id,object_id,u,v,visible,uncertainty\n0,1,0,1.0,2.0,1,0.1\n0,2,0,x,2.0,1,0.1\n").unwrap();
        let err = read_tracks(&p).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    #[test]
    fn candidates_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = candidates_path(dir.path(), 5);
        let c = vec![(0, Candidate { pixel: nalgebra::Vector2::new(10.0, 20.0), score: 0.5 })];
        write_candidates(&p, &c).unwrap();
        assert_eq!(read_candidates(&p).unwrap(), c);
    }
}
