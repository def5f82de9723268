//! Causal multi-object tracker. Each object runs in its own lane:
//! frame-to-map registration, pending-point verification, keyframing,
//! graph optimization and TSDF fusion.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::factor_graph::{FactorGraph, GraphError, LmConfig, NoiseModel, Observation};
use crate::geometry::{CameraModel, PointCloud, Pose};
use crate::keypoints::{
    greedy_sample, rotation_to_keyframes, should_sample, strictly_inside_mask, try_promote, Candidate, FrameEvidence,
    Keypoint, PendingChecks, PendingPoint, PromotionConfig, SamplerConfig,
};
use crate::registration::{
    kabsch_align, select_hypothesis, sequential_ransac, two_step_fit, CorrespondenceSet, RansacConfig,
};
use crate::sdf_refine::{refine_pose, RefineConfig};
use crate::sequence::{self, FrameData, Manifest, PoseRow, SequenceError, TrackRecord};
use crate::tsdf::{depth_at, DepthObservation, TriangleMesh, TsdfConfig, TsdfError, TsdfVolume};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame}: {msg}")]
    Frame { frame: usize, msg: String },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Tsdf(#[from] TsdfError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub sampler: SamplerConfig,
    pub pending: PendingChecks,
    pub promotion: PromotionConfig,
    pub ransac: RansacConfig,
    pub refine: RefineConfig,
    pub tsdf: TsdfConfig,
    pub graph_noise: NoiseModel,
    pub lm: LmConfig,
    /// Records with uncertainty at or above this are ignored for registration.
    pub visibility_gate: f64,
    /// Off: a single robust fit replaces sequential RANSAC and selection.
    pub multi_hypothesis: bool,
    /// Keyframe motion (radians, meters) after optimization that forces a
    /// full TSDF re-fusion.
    pub refuse_rotation: f64,
    pub refuse_translation: f64,
    /// Pending points not promoted within this many frames are dropped.
    pub pending_max_age: usize,
    /// Pixel stride of the dense object cloud.
    pub dense_stride: usize,
    /// Relative cost drop a refinement must reach to replace the registered pose.
    pub refine_min_gain: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            pending: PendingChecks::default(),
            promotion: PromotionConfig::default(),
            ransac: RansacConfig::default(),
            refine: RefineConfig::default(),
            tsdf: TsdfConfig::default(),
            graph_noise: NoiseModel::default(),
            lm: LmConfig::default(),
            visibility_gate: 0.5,
            multi_hypothesis: true,
            refuse_rotation: 0.5f64.to_radians(),
            refuse_translation: 0.002,
            pending_max_age: 30,
            dense_stride: 1,
            refine_min_gain: 1e-3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.sampler.is_valid() || self.sampler.k == 0 {
            return Err("sampler parameters out of range".into());
        }
        self.ransac.validate().map_err(|e| e.to_string())?;
        self.refine.validate().map_err(|e| e.to_string())?;
        let t = &self.tsdf;
        if !(t.voxel_size > 0.0) || !(t.truncation > 0.0) || t.max_dim < 2 || t.padding_truncations < 0.0 {
            return Err("tsdf parameters out of range".into());
        }
        if !(self.visibility_gate > 0.0 && self.visibility_gate <= 1.0) {
            return Err("visibility gate must lie in (0, 1]".into());
        }
        if self.dense_stride == 0 || self.promotion.n_streak == 0 {
            return Err("dense stride and streak threshold must be positive".into());
        }
        if !(0.0..1.0).contains(&self.refine_min_gain) {
            return Err("refine_min_gain must lie in [0, 1)".into());
        }
        if !(self.refuse_rotation >= 0.0 && self.refuse_translation >= 0.0) {
            return Err("re-fusion thresholds must be non-negative".into());
        }
        let p = &self.pending;
        if !(p.max_rotation > 0.0 && p.max_translation > 0.0 && p.max_uncertainty > 0.0) {
            return Err("pending checks must be positive".into());
        }
        Ok(())
    }
}

/// A candidate already bound to the track that starts at its pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackCandidate {
    pub object_id: usize,
    pub track_id: usize,
    pub candidate: Candidate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub index: usize,
    pub depth: Vec<f32>,
    pub labels: Vec<u8>,
    pub color: Option<Vec<[u8; 3]>>,
    pub records: Vec<TrackRecord>,
    /// Empty on frames where no candidates were detected.
    pub candidates: Vec<TrackCandidate>,
}

impl FrameInput {
    fn validate(&self, cam: &CameraModel) -> std::result::Result<(), String> {
        let n = cam.pixel_count();
        if self.depth.len() != n || self.labels.len() != n {
            return Err(format!("image size {} / {} does not match camera ({n})", self.depth.len(), self.labels.len()));
        }
        if self.color.as_ref().is_some_and(|c| c.len() != n) {
            return Err("color image size does not match camera".into());
        }
        if let Some(r) = self.records.iter().find(|r| r.frame != self.index) {
            return Err(format!("track {} carries frame {}", r.track_id, r.frame));
        }
        if let Some(r) = self
            .records
            .iter()
            .find(|r| !(r.u.is_finite() && r.v.is_finite()) || !(0.0..=1.0).contains(&r.uncertainty))
        {
            return Err(format!("track {} has a malformed record", r.track_id));
        }
        Ok(())
    }

    fn mask_of(&self, object_id: usize) -> Vec<bool> {
        let l = (object_id + 1) as u8;
        self.labels.iter().map(|&v| v == l).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Waiting for the first frame the object can be initialized on.
    Uninitialized,
    Tracking,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseReport {
    pub frame: usize,
    pub object_id: usize,
    pub pose: Pose,
    pub status: Status,
    pub keyframe: bool,
    pub correspondences: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct KeyframeRecord {
    frame: usize,
    /// Registration output at creation; odometry is measured between these.
    raw_pose: Pose,
    /// Pose the frame was last fused at.
    fused_pose: Pose,
    depth: Vec<f32>,
    mask: Vec<bool>,
    color: Option<Vec<[u8; 3]>>,
    /// Camera-frame points of every owned visible track, by track id.
    measurements: BTreeMap<usize, Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct PendingEntry {
    point: PendingPoint,
    source_keyframe: usize,
}

/// Lifted, gated record.
#[derive(Debug, Clone, Copy)]
struct Lifted {
    track_id: usize,
    pixel: Vector2<f64>,
    point: Vector3<f64>,
}

/// Per-object lane state.
#[derive(Debug, Clone)]
pub struct ObjectTracker {
    pub object_id: usize,
    pub pose: Pose,
    pub status: Status,
    pub last_good: Option<(usize, Pose)>,
    pub keypoints: Vec<Keypoint>,
    landmark_of: Vec<Option<usize>>,
    keypoint_index: HashMap<usize, usize>,
    pending: Vec<PendingEntry>,
    pub volume: Option<TsdfVolume>,
    pub graph: FactorGraph,
    keyframes: Vec<KeyframeRecord>,
    prev_pose: Pose,
    sample_requested: bool,
    last_frame: Option<usize>,
}

impl ObjectTracker {
    pub fn new(object_id: usize, cfg: &PipelineConfig) -> Self {
        Self {
            object_id,
            pose: Pose::identity(),
            status: Status::Uninitialized,
            last_good: None,
            keypoints: Vec::new(),
            landmark_of: Vec::new(),
            keypoint_index: HashMap::new(),
            pending: Vec::new(),
            volume: None,
            graph: FactorGraph::new(cfg.graph_noise, cfg.lm),
            keyframes: Vec::new(),
            prev_pose: Pose::identity(),
            sample_requested: false,
            last_frame: None,
        }
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn keyframe_frames(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.frame).collect()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    fn owns(&self, track_id: usize) -> bool {
        self.keypoint_index.contains_key(&track_id) || self.pending.iter().any(|p| p.point.track_id == track_id)
    }

    pub fn mesh(&self) -> TriangleMesh {
        self.volume.as_ref().map(|v| v.extract_mesh()).unwrap_or_default()
    }

    /// Advances this lane by one frame. Returns the pose report; on error the
    /// lane is left unchanged.
    pub fn process(&mut self, cam: &CameraModel, input: &FrameInput, cfg: &PipelineConfig) -> Result<PoseReport> {
        let frame_err = |msg: String| PipelineError::Frame { frame: input.index, msg };
        if self.last_frame.is_some_and(|f| input.index <= f) {
            return Err(frame_err(format!("frame index not increasing after {}", self.last_frame.unwrap_or(0))));
        }
        input.validate(cam).map_err(frame_err)?;
        let mut next = self.clone();
        let report = next.step(cam, input, cfg)?;
        *self = next;
        Ok(report)
    }

    fn step(&mut self, cam: &CameraModel, input: &FrameInput, cfg: &PipelineConfig) -> Result<PoseReport> {
        let t = input.index;
        self.last_frame = Some(t);
        let mask = input.mask_of(self.object_id);
        let mut keyframe = false;

        if self.status == Status::Uninitialized {
            if self.initialize(cam, input, &mask, cfg)? {
                keyframe = true;
                self.last_good = Some((t, self.pose));
            }
            self.prev_pose = self.pose;
            return Ok(self.report(t, keyframe, 0));
        }

        let lifted = self.lift(cam, input, &mask, cfg.visibility_gate);
        let mut corr = CorrespondenceSet::default();
        let mut corr_tracks = Vec::new();
        for l in &lifted {
            if let Some(&k) = self.keypoint_index.get(&l.track_id) {
                corr.push(l.point, self.keypoints[k].position);
                corr_tracks.push(l.track_id);
            }
        }
        let n_corr = corr.len();
        let dense = dense_cloud(cam, &input.depth, &mask, cfg.dense_stride);
        // Map tracks that agreed with the accepted hypothesis; None when the
        // pose came from the fallback.
        let mut inlier_tracks: Option<Vec<usize>> = None;
        match self.register(&corr, &dense, cfg) {
            Some((pose, inliers)) => {
                inlier_tracks = inliers.map(|idx| idx.iter().map(|&i| corr_tracks[i]).collect());
                self.pose = pose;
                self.status = Status::Tracking;
                self.last_good = Some((t, pose));
            }
            None => {
                // Freeze at the last good pose; nothing is extrapolated.
                self.status = Status::Lost;
                for p in &mut self.pending {
                    p.point.reset_streak();
                }
            }
        }

        if self.status == Status::Tracking {
            self.update_pending(cam, input, &mask, &lifted, cfg);
            let visible = lifted.iter().filter(|l| self.owns(l.track_id)).count();
            let rotation = rotation_to_keyframes(&self.pose, self.keyframes.iter().map(|k| &k.fused_pose));
            if should_sample(rotation, visible, &cfg.sampler) {
                self.sample_requested = true;
            }
            let has_candidates = input.candidates.iter().any(|c| c.object_id == self.object_id);
            // Keyframes are only anchored on consensus-backed poses.
            if let (true, true, Some(inliers)) = (self.sample_requested, has_candidates, &inlier_tracks) {
                self.keyframe_event(cam, input, &mask, &lifted, inliers, cfg)?;
                self.sample_requested = false;
                keyframe = true;
            }
        }
        let age = cfg.pending_max_age;
        self.pending.retain(|p| t.saturating_sub(p.point.created_frame) <= age);
        self.prev_pose = self.pose;
        Ok(self.report(t, keyframe, n_corr))
    }

    fn report(&self, frame: usize, keyframe: bool, correspondences: usize) -> PoseReport {
        PoseReport {
            frame,
            object_id: self.object_id,
            pose: self.pose,
            status: self.status,
            keyframe,
            correspondences,
        }
    }

    /// Gated records of this object lifted with the frame's depth.
    /// Depth is read only where the mask says the pixel shows this object.
    fn lift(&self, cam: &CameraModel, input: &FrameInput, mask: &[bool], gate: f64) -> Vec<Lifted> {
        input
            .records
            .iter()
            .filter(|r| r.object_id == self.object_id && r.visible && r.uncertainty < gate)
            .filter_map(|r| {
                let pixel = Vector2::new(r.u, r.v);
                let (c, row) = cam.nearest_pixel(&pixel)?;
                if !mask[row * cam.width + c] {
                    return None;
                }
                let z = depth_at(cam, &input.depth, &pixel)?;
                let point = cam.back_project(&pixel, z).ok()?;
                Some(Lifted { track_id: r.track_id, pixel, point })
            })
            .collect()
    }

    /// Registered pose and, unless it came from the fallback, the inlier
    /// indices of the accepted hypothesis.
    fn register(
        &self,
        corr: &CorrespondenceSet,
        dense: &PointCloud,
        cfg: &PipelineConfig,
    ) -> Option<(Pose, Option<Vec<usize>>)> {
        if corr.len() < crate::registration::MIN_SAMPLE {
            return None;
        }
        let volume = self.volume.as_ref()?;
        let refine = |pose: &Pose| -> Option<(Pose, f64, f64)> {
            if dense.is_empty() {
                return None;
            }
            let r = refine_pose(pose, dense, volume, &cfg.refine).ok()?;
            Some((r.pose, r.initial_cost, r.cost))
        };

        let hypotheses = if cfg.multi_hypothesis {
            sequential_ransac(corr, &cfg.ransac).unwrap_or_default()
        } else {
            two_step_fit(corr, cfg.ransac.inlier_threshold).into_iter().collect()
        };
        if hypotheses.is_empty() {
            // Degraded regime: plain alignment, kept only if every pair and
            // the surface agree with it.
            let pose = kabsch_align(corr).ok()?;
            if (0..corr.len()).any(|i| corr.residual(&pose, i) > cfg.ransac.inlier_threshold)
                || planar_spread(&corr.model) < MIN_FALLBACK_SPREAD
            {
                return None;
            }
            return match refine(&pose) {
                Some((refined, c0, c1)) if c1 < c0 => Some((refined, None)),
                _ => None,
            };
        }
        let chosen = if hypotheses.len() == 1 || dense.is_empty() {
            0
        } else {
            select_hypothesis(&hypotheses, dense, volume).map_or(0, |s| s.index)
        };
        let selected = hypotheses[chosen].pose;
        // Gains below the configured fraction are treated as discretization
        // noise of the volume and leave the registered pose alone.
        let out = refine(&selected).filter(|&(_, c0, c1)| c1 < c0 * (1.0 - cfg.refine_min_gain));
        let pose = out.map_or(selected, |(p, _, _)| p);
        // Inliers are re-counted against the refined pose so the graph only
        // sees pairs consistent with what is reported.
        let inliers = (0..corr.len())
            .filter(|&i| corr.residual(&pose, i) < cfg.ransac.inlier_threshold)
            .collect();
        Some((pose, Some(inliers)))
    }

    fn update_pending(&mut self, cam: &CameraModel, input: &FrameInput, mask: &[bool], lifted: &[Lifted], cfg: &PipelineConfig) {
        let delta = self.prev_pose.inverse().compose(&self.pose);
        let to_object = self.pose.inverse();
        let by_track: HashMap<usize, &TrackRecord> = input
            .records
            .iter()
            .filter(|r| r.object_id == self.object_id)
            .map(|r| (r.track_id, r))
            .collect();
        let lifted_by_track: HashMap<usize, &Lifted> = lifted.iter().map(|l| (l.track_id, l)).collect();
        for entry in &mut self.pending {
            let id = entry.point.track_id;
            let Some(rec) = by_track.get(&id) else {
                entry.point.reset_streak();
                continue;
            };
            let pixel = Vector2::new(rec.u, rec.v);
            let depth = depth_at(cam, &input.depth, &pixel);
            let inside = cam
                .nearest_pixel(&pixel)
                .is_some_and(|(c, r)| strictly_inside_mask(mask, cam.width, cam.height, c, r));
            let point = lifted_by_track
                .get(&id)
                .map(|l| l.point)
                .or_else(|| depth.and_then(|z| cam.back_project(&pixel, z).ok()))
                .map_or(Vector3::repeat(f64::NAN), |p| to_object.transform_point(&p));
            let ev = FrameEvidence {
                pose_delta: delta,
                visible: rec.visible,
                depth_valid: depth.is_some(),
                uncertainty: rec.uncertainty,
                inside_mask: inside,
                point,
            };
            entry.point.update(&ev, &cfg.pending);
        }
        let mut kept = Vec::with_capacity(self.pending.len());
        for entry in std::mem::take(&mut self.pending) {
            match try_promote(&entry.point, &cfg.promotion, entry.source_keyframe) {
                Ok(kp) => self.add_keypoint(kp),
                Err(_) => kept.push(entry),
            }
        }
        self.pending = kept;
    }

    fn add_keypoint(&mut self, kp: Keypoint) {
        self.keypoint_index.insert(kp.track_id, self.keypoints.len());
        self.keypoints.push(kp);
        self.landmark_of.push(None);
    }

    /// First frame: identity pose, frame-0 samples enter the map directly
    /// and the frame seeds the TSDF.
    fn initialize(&mut self, cam: &CameraModel, input: &FrameInput, mask: &[bool], cfg: &PipelineConfig) -> Result<bool> {
        let cands = self.candidates_for(input);
        if cands.is_empty() || !mask.iter().any(|&m| m) {
            return Ok(false);
        }
        let picks = greedy_sample(&cands.iter().map(|c| c.candidate).collect::<Vec<_>>(), &[], &cfg.sampler);
        let mut measurements = BTreeMap::new();
        for pick in &picks {
            let Some(tc) = cands.iter().find(|c| c.candidate == *pick) else { continue };
            let Some(z) = depth_at(cam, &input.depth, &pick.pixel) else { continue };
            let Ok(p) = cam.back_project(&pick.pixel, z) else { continue };
            measurements.insert(tc.track_id, p);
            self.add_keypoint(Keypoint { track_id: tc.track_id, position: p, source_keyframe: 0 });
        }
        if self.keypoints.len() < crate::registration::MIN_SAMPLE {
            self.keypoints.clear();
            self.landmark_of.clear();
            self.keypoint_index.clear();
            return Ok(false);
        }
        let cloud = dense_cloud(cam, &input.depth, mask, 1);
        let (lo, hi) = cloud.bounds().expect("mask has valid depth");
        let mut volume = TsdfVolume::around_bounds(&lo, &hi, &cfg.tsdf)?;
        volume.integrate(&DepthObservation {
            camera: *cam,
            depth: input.depth.clone(),
            mask: mask.to_vec(),
            color: input.color.clone(),
            pose: Pose::identity(),
        })?;
        self.volume = Some(volume);
        self.keyframes.push(KeyframeRecord {
            frame: input.index,
            raw_pose: Pose::identity(),
            fused_pose: Pose::identity(),
            depth: input.depth.clone(),
            mask: mask.to_vec(),
            color: input.color.clone(),
            measurements,
        });
        self.pose = Pose::identity();
        self.status = Status::Tracking;
        self.insert_graph_keyframe(None)?;
        Ok(true)
    }

    fn candidates_for(&self, input: &FrameInput) -> Vec<TrackCandidate> {
        input.candidates.iter().filter(|c| c.object_id == self.object_id).copied().collect()
    }

    fn keyframe_event(
        &mut self,
        cam: &CameraModel,
        input: &FrameInput,
        mask: &[bool],
        lifted: &[Lifted],
        inliers: &[usize],
        cfg: &PipelineConfig,
    ) -> Result<()> {
        let m = self.keyframes.len();
        let existing: Vec<Vector2<f64>> = lifted.iter().filter(|l| self.owns(l.track_id)).map(|l| l.pixel).collect();
        let cands = self.candidates_for(input);
        let picks = greedy_sample(&cands.iter().map(|c| c.candidate).collect::<Vec<_>>(), &existing, &cfg.sampler);
        for pick in &picks {
            if let Some(tc) = cands.iter().find(|c| c.candidate == *pick) {
                if !self.owns(tc.track_id) {
                    self.pending.push(PendingEntry { point: PendingPoint::new(tc.track_id, input.index), source_keyframe: m });
                }
            }
        }
        // Map points enter the graph only if they supported the accepted
        // pose; pending points are screened later by promotion.
        let measurements = lifted
            .iter()
            .filter(|l| {
                if self.keypoint_index.contains_key(&l.track_id) {
                    inliers.contains(&l.track_id)
                } else {
                    self.owns(l.track_id)
                }
            })
            .map(|l| (l.track_id, l.point))
            .collect();
        let prev_raw = self.keyframes[m - 1].raw_pose;
        self.keyframes.push(KeyframeRecord {
            frame: input.index,
            raw_pose: self.pose,
            fused_pose: self.pose,
            depth: input.depth.clone(),
            mask: mask.to_vec(),
            color: input.color.clone(),
            measurements,
        });
        // Odometry between raw registrations, in the graph's inverse-pose form.
        let odometry = prev_raw.compose(&self.pose.inverse());
        if let Err(e) = self.insert_graph_keyframe(Some(odometry)) {
            log::warn!("object {}: keyframe {m} graph update failed: {e}", self.object_id);
            self.keyframes.pop();
            return Ok(());
        }
        self.update_volume(cam, cfg)?;
        Ok(())
    }

    /// Adds the newest keyframe to the graph with every observation it
    /// makes, plus landmarks for keypoints that have none yet, then writes
    /// the optimized estimates back.
    fn insert_graph_keyframe(&mut self, odometry: Option<Pose>) -> std::result::Result<(), GraphError> {
        let m = self.keyframes.len() - 1;
        let mut next_landmark = self.graph.state.landmarks.len();
        let mut new_landmarks = Vec::new();
        let mut observations = Vec::new();
        let mut assigned = Vec::new();
        for (k, kp) in self.keypoints.iter().enumerate() {
            match self.landmark_of[k] {
                Some(l) => {
                    if let Some(meas) = self.keyframes[m].measurements.get(&kp.track_id) {
                        observations.push(Observation { keyframe: m, landmark: l, measurement: *meas });
                    }
                }
                None => {
                    let seen: Vec<Observation> = self
                        .keyframes
                        .iter()
                        .enumerate()
                        .filter_map(|(kf, rec)| {
                            rec.measurements.get(&kp.track_id).map(|meas| Observation {
                                keyframe: kf,
                                landmark: next_landmark,
                                measurement: *meas,
                            })
                        })
                        .collect();
                    if !seen.is_empty() {
                        observations.extend(seen);
                        new_landmarks.push(kp.position);
                        assigned.push((k, next_landmark));
                        next_landmark += 1;
                    }
                }
            }
        }
        self.graph.insert_keyframe(self.pose.inverse(), odometry, &new_landmarks, &observations)?;
        for (k, l) in assigned {
            self.landmark_of[k] = Some(l);
        }
        for (k, l) in self.landmark_of.iter().enumerate() {
            if let Some(l) = l {
                self.keypoints[k].position = self.graph.state.landmarks[*l];
            }
        }
        self.pose = self.graph.state.poses[m].inverse();
        Ok(())
    }

    /// Integrates the newest keyframe, or re-fuses all of them when the
    /// optimizer moved an earlier keyframe noticeably.
    fn update_volume(&mut self, cam: &CameraModel, cfg: &PipelineConfig) -> Result<()> {
        let poses: Vec<Pose> = self.graph.state.poses.iter().map(|x| x.inverse()).collect();
        let Some(volume) = self.volume.as_mut() else { return Ok(()) };
        let newest = self.keyframes.len() - 1;
        let cloud = dense_cloud(cam, &self.keyframes[newest].depth, &self.keyframes[newest].mask, 1)
            .transformed(&poses[newest].inverse());
        if let Some((lo, hi)) = cloud.bounds() {
            let margin = 3.0 * cfg.tsdf.truncation;
            if let Err(e) = volume.grow_to_contain(&lo.add_scalar(-margin), &hi.add_scalar(margin), 0.0, cfg.tsdf.max_dim) {
                log::warn!("object {}: volume not grown: {e}", self.object_id);
            }
        }
        let moved = self.keyframes[..newest].iter().zip(&poses).any(|(k, p)| {
            k.fused_pose.rotation_distance(p) > cfg.refuse_rotation
                || k.fused_pose.translation_distance(p) > cfg.refuse_translation
        });
        let range = if moved {
            volume.clear();
            0..=newest
        } else {
            newest..=newest
        };
        for i in range {
            let k = &mut self.keyframes[i];
            volume.integrate(&DepthObservation {
                camera: *cam,
                depth: k.depth.clone(),
                mask: k.mask.clone(),
                color: k.color.clone(),
                pose: poses[i],
            })?;
            k.fused_pose = poses[i];
        }
        Ok(())
    }
}

/// Fallback alignments need model points spread this far (meters) along
/// their second principal axis; near-collinear sets leave rotation loose.
const MIN_FALLBACK_SPREAD: f64 = 0.005;

/// RMS extent of a point set along its second principal axis.
fn planar_spread(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<nalgebra::Matrix3<f64>>() / points.len() as f64;
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev[1].max(0.0).sqrt()
}

/// Camera-frame cloud of mask pixels with valid depth.
pub fn dense_cloud(cam: &CameraModel, depth: &[f32], mask: &[bool], stride: usize) -> PointCloud {
    let mut pts = Vec::new();
    for row in (0..cam.height).step_by(stride) {
        for col in (0..cam.width).step_by(stride) {
            let i = row * cam.width + col;
            if mask[i] && depth[i] > 0.0 {
                if let Ok(p) = cam.back_project(&Vector2::new(col as f64, row as f64), depth[i] as f64) {
                    pts.push(p);
                }
            }
        }
    }
    PointCloud::new(pts)
}

/// All object lanes for one sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub camera: CameraModel,
    pub config: PipelineConfig,
    pub lanes: Vec<ObjectTracker>,
}

impl Tracker {
    pub fn new(camera: CameraModel, object_ids: &[usize], config: PipelineConfig) -> Self {
        let lanes = object_ids.iter().map(|&id| ObjectTracker::new(id, &config)).collect();
        Self { camera, config, lanes }
    }

    /// One frame across all lanes. Lanes run concurrently and share only the
    /// read-only input; if any lane rejects the frame, no lane changes.
    pub fn process_frame(&mut self, input: &FrameInput) -> Result<Vec<PoseReport>> {
        let (cam, cfg) = (&self.camera, &self.config);
        let results: Vec<Result<(ObjectTracker, PoseReport)>> = self
            .lanes
            .par_iter()
            .map(|lane| {
                let mut next = lane.clone();
                next.process(cam, input, cfg).map(|r| (next, r))
            })
            .collect();
        let mut lanes = Vec::with_capacity(results.len());
        let mut reports = Vec::with_capacity(results.len());
        for r in results {
            let (lane, report) = r?;
            lanes.push(lane);
            reports.push(report);
        }
        self.lanes = lanes;
        Ok(reports)
    }
}

// ---------------------------------------------------------------------------
// sequence runner

/// Track records grouped by frame plus the start pixel of every track.
#[derive(Debug, Clone, Default)]
pub struct TrackTable {
    by_frame: BTreeMap<usize, Vec<TrackRecord>>,
    starts: HashMap<(usize, usize, i64, i64), usize>,
}

fn pixel_key(v: f64) -> i64 {
    (v * 1000.0).round() as i64
}

impl TrackTable {
    pub fn new(records: Vec<TrackRecord>) -> Self {
        let mut table = TrackTable::default();
        let mut first: HashMap<usize, (usize, usize, f64, f64)> = HashMap::new();
        for r in records {
            let e = first.entry(r.track_id).or_insert((r.frame, r.object_id, r.u, r.v));
            if r.frame < e.0 {
                *e = (r.frame, r.object_id, r.u, r.v);
            }
            table.by_frame.entry(r.frame).or_default().push(r);
        }
        for (id, (frame, obj, u, v)) in first {
            table.starts.insert((frame, obj, pixel_key(u), pixel_key(v)), id);
        }
        table
    }

    pub fn records_at(&self, t: usize) -> Vec<TrackRecord> {
        self.by_frame.get(&t).cloned().unwrap_or_default()
    }

    /// Binds candidates to tracks starting at the same frame and pixel;
    /// unmatched candidates are dropped.
    pub fn bind(&self, t: usize, candidates: &[(usize, Candidate)]) -> Vec<TrackCandidate> {
        candidates
            .iter()
            .filter_map(|(obj, c)| {
                self.starts
                    .get(&(t, *obj, pixel_key(c.pixel.x), pixel_key(c.pixel.y)))
                    .map(|&track_id| TrackCandidate { object_id: *obj, track_id, candidate: *c })
            })
            .collect()
    }
}

pub fn load_frame_input(dir: &Path, manifest: &Manifest, table: &TrackTable, t: usize) -> Result<FrameInput> {
    let FrameData { index, depth, labels, color } = sequence::read_frame(dir, manifest, t)?;
    let cpath = sequence::candidates_path(dir, t);
    let candidates = if cpath.exists() { table.bind(t, &sequence::read_candidates(&cpath)?) } else { Vec::new() };
    Ok(FrameInput { index, depth, labels, color, records: table.records_at(t), candidates })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneSummary {
    pub object_id: usize,
    pub keyframes: Vec<usize>,
    pub keypoints: usize,
    /// Inclusive frame intervals with status lost.
    pub lost_intervals: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub frames: usize,
    pub lanes: Vec<LaneSummary>,
    pub reports: Vec<Vec<PoseReport>>,
    pub seconds: f64,
}

impl RunSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames {}", self.frames);
        let _ = writeln!(s, "seconds {:.3}", self.seconds);
        for lane in &self.lanes {
            let _ = writeln!(s, "object {}", lane.object_id);
            let kf: Vec<String> = lane.keyframes.iter().map(|f| f.to_string()).collect();
            let _ = writeln!(s, "  keyframes {} [{}]", lane.keyframes.len(), kf.join(","));
            let _ = writeln!(s, "  keypoints {}", lane.keypoints);
            let lost: Vec<String> = lane.lost_intervals.iter().map(|(a, b)| format!("{a}-{b}")).collect();
            let _ = writeln!(s, "  lost [{}]", lost.join(","));
        }
        s
    }
}

/// Reads back the `object`/`lost` lines written by [`RunSummary::render`].
pub fn parse_lost_intervals(text: &str) -> std::result::Result<Vec<(usize, Vec<(usize, usize)>)>, String> {
    let mut out: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || format!("line {}: malformed entry {line:?}", n + 1);
        let line = line.trim();
        if let Some(id) = line.strip_prefix("object ") {
            out.push((id.trim().parse().map_err(|_| bad())?, Vec::new()));
        } else if let Some(rest) = line.strip_prefix("lost ") {
            let body = rest.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
            let (_, list) = out.last_mut().ok_or_else(bad)?;
            for item in body.split(',').filter(|s| !s.is_empty()) {
                let (a, b) = item.split_once('-').ok_or_else(bad)?;
                list.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
            }
        }
    }
    Ok(out)
}

pub fn lost_intervals(reports: &[PoseReport]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for r in reports.iter().filter(|r| r.status == Status::Lost) {
        match out.last_mut() {
            Some((_, end)) if *end + 1 == r.frame => *end = r.frame,
            _ => out.push((r.frame, r.frame)),
        }
    }
    out
}

/// Tracks every object of a sequence directory and writes pose CSVs, meshes
/// and a summary into `out`.
pub fn run_sequence(seq: &Path, out: &Path, cfg: &PipelineConfig) -> Result<RunSummary> {
    let start = Instant::now();
    cfg.validate().map_err(|msg| PipelineError::Frame { frame: 0, msg: format!("invalid configuration: {msg}") })?;
    let manifest = Manifest::read(seq)?;
    let table = TrackTable::new(sequence::read_tracks(&seq.join("tracks.csv"))?);
    let mut tracker = Tracker::new(manifest.camera, &manifest.object_ids, cfg.clone());
    let mut reports: Vec<Vec<PoseReport>> = vec![Vec::with_capacity(manifest.frames); manifest.object_ids.len()];
    for t in 0..manifest.frames {
        let input = load_frame_input(seq, &manifest, &table, t)?;
        for (lane, r) in tracker.process_frame(&input)?.into_iter().enumerate() {
            reports[lane].push(r);
        }
        log::debug!("frame {t} done");
    }

    fs::create_dir_all(out).map_err(|source| PipelineError::Io { path: out.to_path_buf(), source })?;
    let mut lanes = Vec::new();
    for (lane, reps) in tracker.lanes.iter().zip(&reports) {
        let rows: Vec<PoseRow> = reps.iter().map(|r| PoseRow { frame: r.frame, object_id: r.object_id, pose: r.pose }).collect();
        sequence::write_poses(&sequence::poses_path(out, lane.object_id), &rows)?;
        lane.mesh().write_obj(&sequence::mesh_path(out, lane.object_id))?;
        lanes.push(LaneSummary {
            object_id: lane.object_id,
            keyframes: lane.keyframe_frames(),
            keypoints: lane.keypoints.len(),
            lost_intervals: lost_intervals(reps),
        });
    }
    let summary = RunSummary { frames: manifest.frames, lanes, reports, seconds: start.elapsed().as_secs_f64() };
    let path = out.join("summary.txt");
    fs::write(&path, summary.render()).map_err(|source| PipelineError::Io { path, source })?;
    Ok(summary)
}
