//! Object-centric truncated signed distance volume.
//!
//! Values are stored normalized by the truncation margin τ, so the fused field
//! lives in `[-1, 1]`. Voxels never observed keep weight 0 and the sentinel
//! value `+1`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{CameraModel, Pose};
use crate::mc_tables::{CORNERS, EDGE_CORNERS, TRIANGLES};

#[derive(Debug, Error)]
pub enum TsdfError {
    #[error("invalid volume parameters: {0}")]
    InvalidVolume(String),
    #[error("observation does not match the camera: {0}")]
    DimensionMismatch(String),
    #[error("volume would exceed {max} voxels per axis")]
    TooLarge { max: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// Volume construction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    pub truncation: f64,
    /// Padding around the first observed cloud, in multiples of τ.
    pub padding_truncations: f64,
    pub max_dim: usize,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.004,
            truncation: 0.012,
            padding_truncations: 10.0,
            max_dim: 256,
        }
    }
}

/// One segmented RGB-D frame with the pose mapping object to camera frame.
#[derive(Debug, Clone)]
pub struct DepthObservation {
    pub camera: CameraModel,
    /// Row-major z-depth in meters, 0 = invalid.
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
    /// Row-major RGB; fused into the color grid when present.
    pub color: Option<Vec<[u8; 3]>>,
    pub pose: Pose,
}

impl DepthObservation {
    fn validate(&self) -> Result<(), TsdfError> {
        let n = self.camera.pixel_count();
        if self.depth.len() != n {
            return Err(TsdfError::DimensionMismatch(format!(
                "depth has {} pixels, camera expects {n}",
                self.depth.len()
            )));
        }
        if self.mask.len() != n {
            return Err(TsdfError::DimensionMismatch(format!(
                "mask has {} pixels, camera expects {n}",
                self.mask.len()
            )));
        }
        if let Some(c) = &self.color {
            if c.len() != n {
                return Err(TsdfError::DimensionMismatch(format!(
                    "color has {} pixels, camera expects {n}",
                    c.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    origin: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    truncation: f64,
    sdf: Vec<f64>,
    weight: Vec<f32>,
    color: Vec<[f32; 3]>,
    fused_frames: usize,
}

impl TsdfVolume {
    pub fn new(
        origin: Vector3<f64>,
        voxel_size: f64,
        dims: [usize; 3],
        truncation: f64,
    ) -> Result<Self, TsdfError> {
        if !(voxel_size > 0.0) || !(truncation > 0.0) {
            return Err(TsdfError::InvalidVolume(format!(
                "voxel size {voxel_size} and truncation {truncation} must be positive"
            )));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(TsdfError::InvalidVolume(format!(
                "every axis needs at least 2 voxels, got {dims:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            voxel_size,
            dims,
            truncation,
            sdf: vec![1.0; n],
            weight: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            fused_frames: 0,
        })
    }

    /// Allocates a grid covering `[lo, hi]` padded by the configured margin.
    pub fn around_bounds(
        lo: &Vector3<f64>,
        hi: &Vector3<f64>,
        cfg: &TsdfConfig,
    ) -> Result<Self, TsdfError> {
        let pad = cfg.padding_truncations * cfg.truncation;
        let origin = lo.add_scalar(-pad);
        let extent = hi - lo;
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let n = ((extent[a] + 2.0 * pad) / cfg.voxel_size).ceil() as usize + 1;
            if n > cfg.max_dim {
                return Err(TsdfError::TooLarge { max: cfg.max_dim });
            }
            dims[a] = n.max(2);
        }
        Self::new(origin, cfg.voxel_size, dims, cfg.truncation)
    }

    /// Fills the grid from a signed distance function (meters), weight 1
    /// everywhere. Used for ground-truth meshes and analytic fixtures.
    pub fn from_sdf<F: Fn(&Vector3<f64>) -> f64>(
        origin: Vector3<f64>,
        voxel_size: f64,
        dims: [usize; 3],
        truncation: f64,
        f: F,
    ) -> Result<Self, TsdfError> {
        let mut vol = Self::new(origin, voxel_size, dims, truncation)?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let idx = vol.index(i, j, k);
                    let p = vol.voxel_center(i, j, k);
                    vol.sdf[idx] = (f(&p) / truncation).clamp(-1.0, 1.0);
                    vol.weight[idx] = 1.0;
                    vol.color[idx] = [0.7, 0.7, 0.7];
                }
            }
        }
        vol.fused_frames = 1;
        Ok(vol)
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn fused_frames(&self) -> usize {
        self.fused_frames
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.sdf[self.index(i, j, k)]
    }

    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weight[self.index(i, j, k)] as f64
    }

    pub fn color(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let c = self.color[self.index(i, j, k)];
        [c[0] as f64, c[1] as f64, c[2] as f64]
    }

    /// Overwrites one voxel; test fixtures use this to inject structures.
    pub fn set_voxel(&mut self, i: usize, j: usize, k: usize, value: f64, weight: f64) {
        let idx = self.index(i, j, k);
        self.sdf[idx] = value.clamp(-1.0, 1.0);
        self.weight[idx] = weight.max(0.0) as f32;
        if weight <= 0.0 {
            self.sdf[idx] = 1.0;
        }
    }

    pub fn upper_corner(&self) -> Vector3<f64> {
        self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    pub fn contains_box(&self, lo: &Vector3<f64>, hi: &Vector3<f64>) -> bool {
        let up = self.upper_corner();
        (0..3).all(|a| lo[a] >= self.origin[a] && hi[a] <= up[a])
    }

    /// Enlarges the grid so that `[lo, hi]` (plus `margin`) fits, keeping the
    /// voxel lattice and all fused data. Returns whether a reallocation
    /// happened.
    pub fn grow_to_contain(
        &mut self,
        lo: &Vector3<f64>,
        hi: &Vector3<f64>,
        margin: f64,
        max_dim: usize,
    ) -> Result<bool, TsdfError> {
        if self.contains_box(lo, hi) {
            return Ok(false);
        }
        let up = self.upper_corner();
        let s = self.voxel_size;
        let mut shift = [0usize; 3];
        let mut dims = self.dims;
        for a in 0..3 {
            if lo[a] < self.origin[a] {
                shift[a] = ((self.origin[a] - lo[a] + margin) / s).ceil() as usize;
            }
            let extra_hi = if hi[a] > up[a] {
                ((hi[a] - up[a] + margin) / s).ceil() as usize
            } else {
                0
            };
            dims[a] = self.dims[a] + shift[a] + extra_hi;
            if dims[a] > max_dim {
                return Err(TsdfError::TooLarge { max: max_dim });
            }
        }
        let origin = self.origin
            - Vector3::new(shift[0] as f64, shift[1] as f64, shift[2] as f64) * s;
        let mut grown = TsdfVolume::new(origin, s, dims, self.truncation)?;
        grown.fused_frames = self.fused_frames;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let src = self.index(i, j, k);
                    let dst = grown.index(i + shift[0], j + shift[1], k + shift[2]);
                    grown.sdf[dst] = self.sdf[src];
                    grown.weight[dst] = self.weight[src];
                    grown.color[dst] = self.color[src];
                }
            }
        }
        *self = grown;
        Ok(true)
    }

    /// Resets every voxel to the unobserved state, keeping the grid geometry.
    pub fn clear(&mut self) {
        self.sdf.iter_mut().for_each(|v| *v = 1.0);
        self.weight.iter_mut().for_each(|w| *w = 0.0);
        self.color.iter_mut().for_each(|c| *c = [0.0; 3]);
        self.fused_frames = 0;
    }

    /// Projective fusion of one segmented depth frame. Returns the number of
    /// voxels that received an observation.
    pub fn integrate(&mut self, obs: &DepthObservation) -> Result<usize, TsdfError> {
        obs.validate()?;
        let cam = &obs.camera;
        let tau = self.truncation;
        let r = obs.pose.rotation;
        let step_i = r.column(0) * self.voxel_size;
        let step_j = r.column(1) * self.voxel_size;
        let step_k = r.column(2) * self.voxel_size;
        let base = obs.pose.transform_point(&self.origin);
        let (w, h) = (cam.width as f64, cam.height as f64);
        let mut updated = 0;
        for k in 0..self.dims[2] {
            let pk = base + step_k * k as f64;
            for j in 0..self.dims[1] {
                let pj = pk + step_j * j as f64;
                let row_start = self.index(0, j, k);
                for i in 0..self.dims[0] {
                    let v = pj + step_i * i as f64;
                    if v.z <= 0.0 {
                        continue;
                    }
                    let x = cam.fx * v.x / v.z + cam.cx;
                    let y = cam.fy * v.y / v.z + cam.cy;
                    let (u, vv) = (x.round(), y.round());
                    if u < 0.0 || vv < 0.0 || u >= w || vv >= h {
                        continue;
                    }
                    let pix = vv as usize * cam.width + u as usize;
                    if !obs.mask[pix] {
                        continue;
                    }
                    let d = obs.depth[pix] as f64;
                    if !(d > 0.0) || !d.is_finite() {
                        continue;
                    }
                    let d = bilinear_depth(obs, x, y, tau).unwrap_or(d);
                    let sd = d - v.z;
                    if sd < -tau {
                        continue;
                    }
                    let phi = (sd / tau).min(1.0);
                    let idx = row_start + i;
                    let wt = self.weight[idx] as f64;
                    let nw = wt + 1.0;
                    self.sdf[idx] = (self.sdf[idx] * wt + phi) / nw;
                    if let Some(colors) = &obs.color {
                        let c = colors[pix];
                        let dst = &mut self.color[idx];
                        for ch in 0..3 {
                            let obs_c = c[ch] as f64 / 255.0;
                            dst[ch] = ((dst[ch] as f64 * wt + obs_c) / nw) as f32;
                        }
                    }
                    self.weight[idx] = nw as f32;
                    updated += 1;
                }
            }
        }
        self.fused_frames += 1;
        Ok(updated)
    }

    /// Trilinear interpolation of the normalized field; `None` outside the
    /// grid or when any of the 8 corners is unobserved.
    pub fn sample(&self, p: &Vector3<f64>) -> Option<f64> {
        let g = (p - self.origin) / self.voxel_size;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let x = g[a];
            let top = (self.dims[a] - 1) as f64;
            if !(x >= 0.0 && x <= top) {
                return None;
            }
            let f = x.floor().min(top - 1.0);
            base[a] = f as usize;
            frac[a] = x - f;
        }
        let [i, j, k] = base;
        let sx = 1;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        let i000 = self.index(i, j, k);
        let idx = [
            i000,
            i000 + sx,
            i000 + sy,
            i000 + sx + sy,
            i000 + sz,
            i000 + sx + sz,
            i000 + sy + sz,
            i000 + sx + sy + sz,
        ];
        let mut c = [0.0f64; 8];
        for (n, &id) in idx.iter().enumerate() {
            if self.weight[id] <= 0.0 {
                return None;
            }
            c[n] = self.sdf[id];
        }
        let [fx, fy, fz] = frac;
        let c00 = c[0] + (c[1] - c[0]) * fx;
        let c10 = c[2] + (c[3] - c[2]) * fx;
        let c01 = c[4] + (c[5] - c[4]) * fx;
        let c11 = c[6] + (c[7] - c[6]) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        Some(c0 + (c1 - c0) * fz)
    }

    /// Central-difference gradient of [`Self::sample`] with step half a voxel,
    /// in normalized units per meter.
    pub fn gradient(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let h = self.voxel_size * 0.5;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            let fp = self.sample(&(p + e))?;
            let fm = self.sample(&(p - e))?;
            g[a] = (fp - fm) / (2.0 * h);
        }
        Some(g)
    }

    /// Marching cubes at iso-level 0 over fully observed cells, followed by
    /// the largest-component filter.
    pub fn extract_mesh(&self) -> TriangleMesh {
        filter_largest_component(&self.marching_cubes())
    }

    /// Raw marching-cubes surface without component filtering.
    pub fn marching_cubes(&self) -> TriangleMesh {
        let mut mesh = TriangleMesh::default();
        let mut edge_vertex: HashMap<(usize, u8), usize> = HashMap::new();
        let [nx, ny, nz] = self.dims;
        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut vals = [0.0f64; 8];
                    let mut observed = true;
                    let mut case = 0usize;
                    for (c, off) in CORNERS.iter().enumerate() {
                        let idx = self.index(i + off[0], j + off[1], k + off[2]);
                        if self.weight[idx] <= 0.0 {
                            observed = false;
                            break;
                        }
                        vals[c] = self.sdf[idx];
                        if vals[c] < 0.0 {
                            case |= 1 << c;
                        }
                    }
                    if !observed || case == 0 || case == 255 {
                        continue;
                    }
                    let tri = &TRIANGLES[case];
                    let mut n = 0;
                    while n < 15 && tri[n] >= 0 {
                        let mut ids = [0usize; 3];
                        for (m, id) in ids.iter_mut().enumerate() {
                            let edge = tri[n + m] as usize;
                            *id = self.edge_vertex(&mut mesh, &mut edge_vertex, [i, j, k], edge, &vals);
                        }
                        if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                            mesh.triangles.push(ids);
                        }
                        n += 3;
                    }
                }
            }
        }
        mesh
    }

    fn edge_vertex(
        &self,
        mesh: &mut TriangleMesh,
        cache: &mut HashMap<(usize, u8), usize>,
        cell: [usize; 3],
        edge: usize,
        vals: &[f64; 8],
    ) -> usize {
        let [a, b] = EDGE_CORNERS[edge];
        let ca = CORNERS[a];
        let cb = CORNERS[b];
        // Key the vertex by the lower grid corner of the edge and its axis so
        // neighboring cells share it.
        let lo = if ca <= cb { ca } else { cb };
        let axis = (0..3).find(|&x| ca[x] != cb[x]).expect("edge has an axis");
        let gi = [cell[0] + lo[0], cell[1] + lo[1], cell[2] + lo[2]];
        let key = (self.index(gi[0], gi[1], gi[2]), axis as u8);
        if let Some(&id) = cache.get(&key) {
            return id;
        }
        let (va, vb) = (vals[a], vals[b]);
        let t = if (vb - va).abs() < 1e-12 { 0.5 } else { va / (va - vb) };
        let pa = self.voxel_center(cell[0] + ca[0], cell[1] + ca[1], cell[2] + ca[2]);
        let pb = self.voxel_center(cell[0] + cb[0], cell[1] + cb[1], cell[2] + cb[2]);
        let col_a = self.color(cell[0] + ca[0], cell[1] + ca[1], cell[2] + ca[2]);
        let col_b = self.color(cell[0] + cb[0], cell[1] + cb[1], cell[2] + cb[2]);
        let id = mesh.vertices.len();
        mesh.vertices.push(pa + (pb - pa) * t);
        mesh.colors.push(Vector3::new(
            col_a[0] + (col_b[0] - col_a[0]) * t,
            col_a[1] + (col_b[1] - col_a[1]) * t,
            col_a[2] + (col_b[2] - col_a[2]) * t,
        ));
        cache.insert(key, id);
        id
    }
}

/// Indexed triangle mesh with per-vertex RGB in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Vec<Vector3<f64>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.triangles
            .iter()
            .all(|t| t.iter().all(|&i| i < self.vertices.len()))
            && self.vertices.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let a = self.vertices[t[0]];
        let b = self.vertices[t[1]];
        let c = self.vertices[t[2]];
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    pub fn transformed(&self, pose: &Pose) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(),
            triangles: self.triangles.clone(),
            colors: self.colors.clone(),
        }
    }

    /// Writes `v x y z r g b` and 1-based `f i j k` lines.
    pub fn write_obj(&self, path: &Path) -> Result<(), TsdfError> {
        let io_err = |source| TsdfError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        self.write_obj_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn write_obj_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (n, v) in self.vertices.iter().enumerate() {
            let c = self
                .colors
                .get(n)
                .copied()
                .unwrap_or_else(|| Vector3::new(0.7, 0.7, 0.7));
            writeln!(
                w,
                "v {:.6} {:.6} {:.6} {:.4} {:.4} {:.4}",
                v.x, v.y, v.z, c.x, c.y, c.z
            )?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn read_obj(path: &Path) -> Result<TriangleMesh, TsdfError> {
        let p = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| TsdfError::Io {
            path: p.clone(),
            source,
        })?;
        let mut mesh = TriangleMesh::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| TsdfError::Io {
                path: p.clone(),
                source,
            })?;
            let parse_err = |msg: String| TsdfError::Parse {
                path: p.clone(),
                line: n + 1,
                msg,
            };
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let vals: Vec<f64> = it
                        .map(|s| s.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| parse_err(e.to_string()))?;
                    if vals.len() != 3 && vals.len() != 6 {
                        return Err(parse_err(format!("vertex with {} values", vals.len())));
                    }
                    mesh.vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
                    let c = if vals.len() == 6 {
                        Vector3::new(vals[3], vals[4], vals[5])
                    } else {
                        Vector3::new(0.7, 0.7, 0.7)
                    };
                    mesh.colors.push(c);
                }
                Some("f") => {
                    let ids: Vec<usize> = it
                        .map(|s| s.split('/').next().unwrap_or("").parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| parse_err(e.to_string()))?;
                    if ids.len() != 3 || ids.iter().any(|&i| i == 0) {
                        return Err(parse_err("faces must be 1-based triangles".into()));
                    }
                    mesh.triangles.push([ids[0] - 1, ids[1] - 1, ids[2] - 1]);
                }
                _ => {}
            }
        }
        if !mesh.is_valid() {
            return Err(TsdfError::Parse {
                path: p,
                line: 0,
                msg: "face index out of range".into(),
            });
        }
        Ok(mesh)
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Keeps only the connected component with the most triangles.
pub fn filter_largest_component(mesh: &TriangleMesh) -> TriangleMesh {
    if mesh.triangles.is_empty() {
        return TriangleMesh::default();
    }
    let mut parent: Vec<usize> = (0..mesh.vertices.len()).collect();
    for t in &mesh.triangles {
        let a = find(&mut parent, t[0]);
        for &v in &t[1..] {
            let b = find(&mut parent, v);
            if a != b {
                parent[b] = a;
            }
        }
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for t in &mesh.triangles {
        *counts.entry(find(&mut parent, t[0])).or_default() += 1;
    }
    // Ties go to the smallest root id for determinism.
    let best = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&root, _)| root)
        .expect("non-empty");
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut out = TriangleMesh::default();
    for t in &mesh.triangles {
        if find(&mut parent, t[0]) != best {
            continue;
        }
        let mut ids = [0usize; 3];
        for (m, &v) in t.iter().enumerate() {
            if remap[v] == usize::MAX {
                remap[v] = out.vertices.len();
                out.vertices.push(mesh.vertices[v]);
                out.colors.push(
                    mesh.colors
                        .get(v)
                        .copied()
                        .unwrap_or_else(|| Vector3::new(0.7, 0.7, 0.7)),
                );
            }
            ids[m] = remap[v];
        }
        out.triangles.push(ids);
    }
    out
}

/// Depth interpolated from the four pixels around `(x, y)`, when all of
/// them are masked, valid and within `tau` of each other.
fn bilinear_depth(obs: &DepthObservation, x: f64, y: f64, tau: f64) -> Option<f64> {
    let cam = &obs.camera;
    let (x0, y0) = (x.floor(), y.floor());
    if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 >= cam.width as f64 || y0 + 1.0 >= cam.height as f64 {
        return None;
    }
    let (c, r) = (x0 as usize, y0 as usize);
    let mut d = [0.0f64; 4];
    for (n, (dc, dr)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let pix = (r + dr) * cam.width + c + dc;
        let z = obs.depth[pix] as f64;
        if !obs.mask[pix] || !(z > 0.0) || !z.is_finite() {
            return None;
        }
        d[n] = z;
    }
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &z| (a.min(z), b.max(z)));
    if hi - lo > tau {
        return None;
    }
    // Inverse depth is affine across a plane, so interpolate that.
    let (fx, fy) = (x - x0, y - y0);
    let inv = |n: usize| 1.0 / d[n];
    let q = (inv(0) * (1.0 - fx) + inv(1) * fx) * (1.0 - fy) + (inv(2) * (1.0 - fx) + inv(3) * fx) * fy;
    Some(1.0 / q)
}

/// Looks up the nearest-pixel depth for a continuous image location.
pub fn depth_at(cam: &CameraModel, depth: &[f32], uv: &Vector2<f64>) -> Option<f64> {
    let (c, r) = cam.nearest_pixel(uv)?;
    let d = depth[r * cam.width + c] as f64;
    (d > 0.0 && d.is_finite()).then_some(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::back_project;

    fn small_cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 20.0, 20.0, 41, 41).unwrap()
    }

    /// A fronto-parallel wall at depth `z`, fully masked.
    fn wall(z: f32) -> DepthObservation {
        let cam = small_cam();
        DepthObservation {
            camera: cam,
            depth: vec![z; cam.pixel_count()],
            mask: vec![true; cam.pixel_count()],
            color: Some(vec![[255, 0, 0]; cam.pixel_count()]),
            pose: Pose::identity(),
        }
    }

    fn column_volume(tau: f64) -> TsdfVolume {
        // A thin column of voxels along the optical axis.
        TsdfVolume::new(Vector3::new(0.0, 0.0, 0.9), 0.002, [2, 2, 101], tau).unwrap()
    }

    #[test]
    fn surface_voxel_fuses_to_zero() {
        let mut vol = column_volume(0.012);
        vol.integrate(&wall(1.0)).unwrap();
        // voxel k=50 sits at z = 1.0
        assert!(vol.value(0, 0, 50).abs() < 1e-6);
        assert_eq!(vol.weight(0, 0, 50), 1.0);
    }

    #[test]
    fn voxel_one_truncation_in_front_saturates() {
        let mut vol = column_volume(0.012);
        vol.integrate(&wall(1.0)).unwrap();
        // z = 0.988 → d = τ
        assert!((vol.value(0, 0, 44) - 1.0).abs() < 1e-6);
        assert_eq!(vol.value(0, 0, 0), 1.0);
    }

    #[test]
    fn voxels_far_behind_surface_are_discarded() {
        let mut vol = column_volume(0.012);
        vol.integrate(&wall(1.0)).unwrap();
        // z = 1.018 → d = −1.5τ
        assert_eq!(vol.weight(0, 0, 59), 0.0);
        assert_eq!(vol.value(0, 0, 59), 1.0);
        // z = 1.010 → d = −0.83τ is accepted
        assert_eq!(vol.weight(0, 0, 55), 1.0);
        assert!((vol.value(0, 0, 55) + 0.010 / 0.012).abs() < 1e-9);
    }

    #[test]
    fn running_mean_and_weights() {
        let mut vol = column_volume(0.012);
        vol.integrate(&wall(1.0)).unwrap();
        vol.integrate(&wall(1.006)).unwrap();
        // at z = 1.0: Φ = 0 then 0.5 → mean 0.25
        // f32 depth input limits this to ~1e-5
        assert!((vol.value(0, 0, 50) - 0.25).abs() < 1e-5);
        assert_eq!(vol.weight(0, 0, 50), 2.0);
        let c = vol.color(0, 0, 50);
        assert!((c[0] - 1.0).abs() < 1e-6 && c[1].abs() < 1e-6);
    }

    #[test]
    fn masked_out_and_invalid_depth_pixels_are_ignored() {
        let mut vol = column_volume(0.012);
        let mut obs = wall(1.0);
        obs.mask.iter_mut().for_each(|m| *m = false);
        vol.integrate(&obs).unwrap();
        assert_eq!(vol.weight(0, 0, 50), 0.0);
        let mut obs = wall(0.0);
        obs.mask.iter_mut().for_each(|m| *m = true);
        vol.integrate(&obs).unwrap();
        assert_eq!(vol.weight(0, 0, 50), 0.0);
    }

    #[test]
    fn mismatched_image_is_rejected() {
        let mut vol = column_volume(0.012);
        let mut obs = wall(1.0);
        obs.depth.pop();
        assert!(matches!(vol.integrate(&obs), Err(TsdfError::DimensionMismatch(_))));
    }

    #[test]
    fn sample_at_voxel_center_and_midpoint() {
        let mut vol = TsdfVolume::new(Vector3::zeros(), 0.01, [3, 3, 3], 0.03).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    vol.set_voxel(i, j, k, if i == 0 { 0.0 } else { 1.0 }, 1.0);
                }
            }
        }
        vol.set_voxel(1, 1, 1, 0.25, 1.0);
        assert_eq!(vol.sample(&vol.voxel_center(1, 1, 1)), Some(0.25));
        let mid = Vector3::new(0.005, 0.0, 0.0);
        assert!((vol.sample(&mid).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(vol.sample(&vol.upper_corner()), Some(1.0));
        assert_eq!(vol.sample(&Vector3::new(-0.001, 0.0, 0.0)), None);
        vol.set_voxel(0, 0, 0, 0.0, 0.0);
        assert_eq!(vol.sample(&mid), None);
    }

    #[test]
    fn gradient_of_linear_ramp_is_exact() {
        let tau = 0.012;
        // V = x/τ stays inside [−1, 1] on a grid spanning [0, τ]
        let vol = TsdfVolume::from_sdf(Vector3::zeros(), 0.004, [4, 4, 4], tau, |p| p.x).unwrap();
        for p in [Vector3::new(0.005, 0.006, 0.004), Vector3::new(0.0071, 0.0023, 0.0099)] {
            let g = vol.gradient(&p).unwrap();
            assert!((g - Vector3::new(1.0 / tau, 0.0, 0.0)).norm() < 1e-6);
        }
        assert!(vol.gradient(&Vector3::new(0.001, 0.005, 0.005)).is_none());
        assert!(vol.gradient(&Vector3::new(1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn empty_volume_gives_empty_mesh() {
        let vol = TsdfVolume::new(Vector3::zeros(), 0.01, [5, 5, 5], 0.03).unwrap();
        assert!(vol.extract_mesh().is_empty());
    }

    fn sphere_volume(r: f64) -> TsdfVolume {
        let s = 0.004;
        let n = 41;
        let origin = Vector3::repeat(-(n as f64 - 1.0) * 0.5 * s);
        TsdfVolume::from_sdf(origin, s, [n, n, n], 0.012, |p| p.norm() - r).unwrap()
    }

    #[test]
    fn analytic_sphere_mesh_lies_on_surface() {
        let mesh = sphere_volume(0.05).extract_mesh();
        assert!(mesh.is_valid());
        assert!(mesh.triangles.len() > 500);
        let err: f64 = mesh.vertices.iter().map(|v| (v.norm() - 0.05).abs()).sum::<f64>()
            / mesh.vertices.len() as f64;
        assert!(err < 0.0005, "mean radial error {err}");
        let area = mesh.surface_area();
        let expected = 4.0 * std::f64::consts::PI * 0.05 * 0.05;
        assert!((area - expected).abs() / expected < 0.05);
    }

    #[test]
    fn isolated_blob_is_filtered() {
        let mut vol = sphere_volume(0.04);
        // two negative voxels in a corner form a separate tiny surface
        vol.set_voxel(2, 2, 2, -0.5, 1.0);
        vol.set_voxel(3, 2, 2, -0.5, 1.0);
        let raw = vol.marching_cubes();
        let filtered = vol.extract_mesh();
        assert!(raw.triangles.len() > filtered.triangles.len());
        assert!(filtered.vertices.iter().all(|v| v.norm() < 0.06));
    }

    #[test]
    fn grow_keeps_fused_data() {
        let mut vol = sphere_volume(0.05);
        let before = vol.sample(&Vector3::new(0.05, 0.0, 0.0)).unwrap();
        let grew = vol
            .grow_to_contain(&Vector3::new(-0.1, -0.01, -0.01), &Vector3::new(0.2, 0.01, 0.01), 0.01, 256)
            .unwrap();
        assert!(grew);
        assert_eq!(vol.sample(&Vector3::new(0.05, 0.0, 0.0)), Some(before));
        assert!(vol.contains_box(&Vector3::new(-0.1, -0.01, -0.01), &Vector3::new(0.2, 0.01, 0.01)));
        assert_eq!(vol.sample(&Vector3::new(0.15, 0.0, 0.0)), None);
    }

    #[test]
    fn fusion_is_order_independent() {
        // a tilted plane seen from three slightly different poses
        let cam = small_cam();
        let make = |z0: f32, tilt: f32| {
            let mut depth = vec![0.0; cam.pixel_count()];
            for r in 0..cam.height {
                for c in 0..cam.width {
                    depth[r * cam.width + c] = z0 + tilt * (c as f32 - 20.0) * 0.001;
                }
            }
            DepthObservation {
                camera: cam,
                depth,
                mask: vec![true; cam.pixel_count()],
                color: None,
                pose: Pose::identity(),
            }
        };
        let obs = [make(1.0, 0.5), make(1.003, -0.3), make(0.998, 0.1)];
        let orders = [[0, 1, 2], [2, 0, 1], [1, 2, 0]];
        let vols: Vec<TsdfVolume> = orders
            .iter()
            .map(|o| {
                let mut v = TsdfVolume::new(Vector3::new(-0.1, -0.1, 0.95), 0.005, [41, 41, 21], 0.012).unwrap();
                for &i in o {
                    v.integrate(&obs[i]).unwrap();
                }
                v
            })
            .collect();
        for v in &vols[1..] {
            assert_eq!(v.weight, vols[0].weight);
            let max = v.sdf.iter().zip(&vols[0].sdf).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            assert!(max < 1e-6);
        }
    }

    #[test]
    fn obj_round_trip() {
        let mesh = sphere_volume(0.03).extract_mesh();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        mesh.write_obj(&path).unwrap();
        let back = TriangleMesh::read_obj(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        assert!(back.vertices.iter().zip(&mesh.vertices).all(|(a, b)| (a - b).norm() < 1e-6));
    }

    #[test]
    fn depth_lookup_uses_nearest_pixel() {
        let cam = small_cam();
        let mut depth = vec![0.0f32; cam.pixel_count()];
        depth[20 * 41 + 21] = 0.5;
        assert_eq!(depth_at(&cam, &depth, &Vector2::new(20.6, 19.7)), Some(0.5));
        assert_eq!(depth_at(&cam, &depth, &Vector2::new(20.4, 19.7)), None);
        let p = back_project(&cam, &Vector2::new(21.0, 20.0), 0.5).unwrap();
        assert!((p.z - 0.5).abs() < 1e-12);
    }
}
