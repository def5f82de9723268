//! Frame-to-map registration: closed-form alignment of tracked correspondences,
//! sequential RANSAC for multiple motion hypotheses, and TSDF-based selection.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{PointCloud, Pose};
use crate::tsdf::TsdfVolume;

/// Size of a minimal sample for a rigid fit.
pub const MIN_SAMPLE: usize = 3;

/// Score contribution of a point that lands outside the observed volume.
pub const OUT_OF_VOLUME_PENALTY: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no hypotheses to select from")]
    NoHypotheses,
    #[error("dense cloud is empty")]
    EmptyCloud,
    #[error("TSDF volume has no fused observations")]
    EmptyVolume,
    #[error("invalid correspondences: {0}")]
    Invalid(String),
}

/// Pairs of (camera-frame observation, object-frame map point).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub observed: Vec<Vector3<f64>>,
    pub model: Vec<Vector3<f64>>,
    /// Optional nonnegative per-pair weights; all ones when absent.
    pub weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(observed: Vec<Vector3<f64>>, model: Vec<Vector3<f64>>) -> Self {
        Self {
            observed,
            model,
            weights: None,
        }
    }

    pub fn from_pairs(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Self {
        Self::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn push(&mut self, observed: Vector3<f64>, model: Vector3<f64>) {
        self.observed.push(observed);
        self.model.push(model);
        if let Some(w) = &mut self.weights {
            w.push(1.0);
        }
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Distance between the observation and the transformed map point.
    pub fn residual(&self, pose: &Pose, i: usize) -> f64 {
        (self.observed[i] - pose.transform_point(&self.model[i])).norm()
    }

    fn validate(&self) -> Result<(), RegistrationError> {
        if self.observed.len() != self.model.len() {
            return Err(RegistrationError::Invalid(format!(
                "{} observations vs {} map points",
                self.observed.len(),
                self.model.len()
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.observed.len() || w.iter().any(|x| !(*x >= 0.0)) {
                return Err(RegistrationError::Invalid(
                    "weights must be nonnegative, one per pair".into(),
                ));
            }
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !self.observed.iter().all(finite) || !self.model.iter().all(finite) {
            return Err(RegistrationError::Invalid("non-finite point".into()));
        }
        Ok(())
    }
}

/// Weighted least-squares rigid alignment (Kabsch with reflection fix),
/// restricted to the pairs in `subset`.
fn kabsch_subset(c: &CorrespondenceSet, subset: &[usize]) -> Result<Pose, RegistrationError> {
    if subset.len() < MIN_SAMPLE {
        return Err(RegistrationError::Degenerate(format!(
            "{} pairs, need at least {MIN_SAMPLE}",
            subset.len()
        )));
    }
    let mut wsum = 0.0;
    let mut mu_obs = Vector3::zeros();
    let mut mu_map = Vector3::zeros();
    for &i in subset {
        let w = c.weight(i);
        wsum += w;
        mu_obs += c.observed[i] * w;
        mu_map += c.model[i] * w;
    }
    if !(wsum > 0.0) {
        return Err(RegistrationError::Degenerate("all weights are zero".into()));
    }
    mu_obs /= wsum;
    mu_map /= wsum;
    let mut cov = Matrix3::zeros();
    let mut spread = 0.0;
    for &i in subset {
        let w = c.weight(i);
        let a = c.model[i] - mu_map;
        let b = c.observed[i] - mu_obs;
        cov += a * b.transpose() * w;
        spread += w * a.norm_squared();
    }
    let svd = cov.svd(true, true);
    let s = svd.singular_values;
    // A collinear (or coincident) map configuration leaves a free rotation.
    if spread <= 0.0 || s[1] <= 1e-12 * spread.max(1e-300) || s[0] <= 0.0 {
        return Err(RegistrationError::Degenerate(
            "map points are collinear or coincident".into(),
        ));
    }
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    Ok(Pose::new(rotation, mu_obs - rotation * mu_map))
}

/// Closed-form pose minimizing `Σ wₙ ‖p̃ₙ − T pₙ‖²`.
pub fn kabsch_align(c: &CorrespondenceSet) -> Result<Pose, RegistrationError> {
    c.validate()?;
    let all: Vec<usize> = (0..c.len()).collect();
    kabsch_subset(c, &all)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub max_hypotheses: usize,
    pub min_consensus: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.01,
            max_iterations: 500,
            max_hypotheses: 4,
            min_consensus: 5,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if !(self.inlier_threshold > 0.0) || self.max_hypotheses < 1 || self.max_iterations < 1 {
            return Err(RegistrationError::Invalid(
                "inlier_threshold > 0, max_hypotheses ≥ 1 and max_iterations ≥ 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseHypothesis {
    /// Object → camera.
    pub pose: Pose,
    /// Indices into the correspondence set, ascending.
    pub inliers: Vec<usize>,
}

impl PoseHypothesis {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }
}

fn inliers_of(c: &CorrespondenceSet, pose: &Pose, pool: &[usize], threshold: f64) -> Vec<usize> {
    pool.iter()
        .copied()
        .filter(|&i| c.residual(pose, i) < threshold)
        .collect()
}

/// One RANSAC round over `pool`; `None` when no sample reaches
/// `min_consensus`.
fn ransac_round(
    c: &CorrespondenceSet,
    pool: &[usize],
    cfg: &RansacConfig,
    round: u64,
) -> Option<PoseHypothesis> {
    if pool.len() < MIN_SAMPLE {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(round);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..cfg.max_iterations {
        let picked: Vec<usize> = sample(&mut rng, pool.len(), MIN_SAMPLE)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        let Ok(model) = kabsch_subset(c, &picked) else {
            continue;
        };
        let inl = inliers_of(c, &model, pool, cfg.inlier_threshold);
        if inl.len() > best.len() {
            best = inl;
            if best.len() == pool.len() {
                break;
            }
        }
    }
    if best.len() < cfg.min_consensus.max(MIN_SAMPLE) {
        return None;
    }
    let refit = kabsch_subset(c, &best).ok()?;
    let grown = inliers_of(c, &refit, pool, cfg.inlier_threshold);
    if grown.len() >= best.len() {
        if let Ok(pose) = kabsch_subset(c, &grown) {
            return Some(PoseHypothesis {
                pose,
                inliers: grown,
            });
        }
    }
    Some(PoseHypothesis {
        pose: refit,
        inliers: best,
    })
}

/// Greedy multi-model extraction: each round's consensus set is removed from
/// the pool before the next round.
pub fn sequential_ransac(
    c: &CorrespondenceSet,
    cfg: &RansacConfig,
) -> Result<Vec<PoseHypothesis>, RegistrationError> {
    c.validate()?;
    cfg.validate()?;
    if c.len() < MIN_SAMPLE {
        return Err(RegistrationError::Degenerate(format!(
            "{} pairs, need at least {MIN_SAMPLE}",
            c.len()
        )));
    }
    let mut pool: Vec<usize> = (0..c.len()).collect();
    let mut out = Vec::new();
    let mut round = 0u64;
    while out.len() < cfg.max_hypotheses && pool.len() >= cfg.min_consensus.max(MIN_SAMPLE) {
        let Some(h) = ransac_round(c, &pool, cfg, round) else {
            break;
        };
        pool.retain(|i| h.inliers.binary_search(i).is_err());
        out.push(h);
        round += 1;
    }
    Ok(out)
}

/// Single-hypothesis robust fit: align everything, drop pairs beyond
/// `threshold`, align again.
pub fn two_step_fit(c: &CorrespondenceSet, threshold: f64) -> Result<PoseHypothesis, RegistrationError> {
    let first = kabsch_align(c)?;
    let all: Vec<usize> = (0..c.len()).collect();
    let inl = inliers_of(c, &first, &all, threshold);
    match kabsch_subset(c, &inl) {
        Ok(pose) => Ok(PoseHypothesis { pose, inliers: inl }),
        Err(_) => Ok(PoseHypothesis {
            pose: first,
            inliers: all,
        }),
    }
}

/// Mean absolute normalized TSDF value of the camera-frame cloud mapped into
/// the object frame by `pose⁻¹`.
pub fn tsdf_score(pose: &Pose, cloud: &PointCloud, volume: &TsdfVolume) -> f64 {
    let inv = pose.inverse();
    let sum: f64 = cloud
        .points
        .iter()
        .map(|p| {
            volume
                .sample(&inv.transform_point(p))
                .map_or(OUT_OF_VOLUME_PENALTY, f64::abs)
        })
        .sum();
    sum / cloud.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub pose: Pose,
    pub score: f64,
    pub scores: Vec<f64>,
}

/// Picks the hypothesis whose pose best explains the dense cloud against the
/// fused volume. Ties: more inliers, then earlier in the list.
pub fn select_hypothesis(
    hyps: &[PoseHypothesis],
    dense_cloud: &PointCloud,
    volume: &TsdfVolume,
) -> Result<Selection, RegistrationError> {
    if hyps.is_empty() {
        return Err(RegistrationError::NoHypotheses);
    }
    if dense_cloud.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    if volume.fused_frames() == 0 {
        return Err(RegistrationError::EmptyVolume);
    }
    let scores: Vec<f64> = hyps
        .iter()
        .map(|h| tsdf_score(&h.pose, dense_cloud, volume))
        .collect();
    let mut best = 0;
    for i in 1..hyps.len() {
        let better = scores[i] < scores[best]
            || (scores[i] == scores[best] && hyps[i].inlier_count() > hyps[best].inlier_count());
        if better {
            best = i;
        }
    }
    Ok(Selection {
        index: best,
        pose: hyps[best].pose,
        score: scores[best],
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, Pose};
    use crate::tsdf::{DepthObservation, TsdfVolume};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Pose::from_axis_angle(
            axis.normalize() * rng.gen_range(0.0..3.0),
            Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
        )
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)))
            .collect()
    }

    fn correspondences(pose: &Pose, model: &[Vector3<f64>]) -> CorrespondenceSet {
        CorrespondenceSet::new(model.iter().map(|p| pose.transform_point(p)).collect(), model.to_vec())
    }

    #[test]
    fn identity_pairs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 10, 0.1);
        let pose = kabsch_align(&correspondences(&Pose::identity(), &pts)).unwrap();
        assert!(pose.max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn pure_translation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 10, 0.1);
        let t = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let pose = kabsch_align(&correspondences(&t, &pts)).unwrap();
        assert!(pose.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn noiseless_random_instances_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let truth = random_pose(&mut rng);
            let n = rng.gen_range(3..60);
            let pts = random_points(&mut rng, n, 0.2);
            let est = kabsch_align(&correspondences(&truth, &pts)).unwrap();
            assert!(est.rotation_distance(&truth) < 1e-9);
            assert!(est.translation_distance(&truth) < 1e-9);
        }
    }

    #[test]
    fn reflection_is_never_returned() {
        // mirrored observations: best proper rotation still has det +1
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 20, 0.1);
        let c = CorrespondenceSet::new(pts.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect(), pts.clone());
        let pose = kabsch_align(&c).unwrap();
        assert!((pose.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weights_select_the_trusted_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 12, 0.1);
        let truth = random_pose(&mut rng);
        let mut c = correspondences(&truth, &pts);
        c.observed[0] += Vector3::new(0.5, 0.0, 0.0);
        let mut w = vec![1.0; 12];
        w[0] = 0.0;
        c.weights = Some(w);
        let pose = kabsch_align(&c).unwrap();
        assert!(pose.max_abs_diff(&truth) < 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let two = CorrespondenceSet::new(vec![Vector3::x(), Vector3::y()], vec![Vector3::x(), Vector3::y()]);
        assert!(matches!(kabsch_align(&two), Err(RegistrationError::Degenerate(_))));
        let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = CorrespondenceSet::new(line.clone(), line);
        assert!(matches!(kabsch_align(&c), Err(RegistrationError::Degenerate(_))));
        assert!(matches!(
            sequential_ransac(&two, &RansacConfig::default()),
            Err(RegistrationError::Degenerate(_))
        ));
    }

    #[test]
    fn single_motion_gives_one_hypothesis() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = random_pose(&mut rng);
        let pts = random_points(&mut rng, 40, 0.1);
        let c = correspondences(&truth, &pts);
        let hyps = sequential_ransac(&c, &RansacConfig::default()).unwrap();
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].inlier_count(), 40);
        assert!(hyps[0].pose.max_abs_diff(&kabsch_align(&c).unwrap()) < 1e-12);
    }

    pub(crate) fn two_motion_set(rng: &mut ChaCha8Rng, a: &Pose, b: &Pose, n_a: usize, n_b: usize, noise: f64) -> CorrespondenceSet {
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut c = CorrespondenceSet::default();
        for k in 0..(n_a + n_b) {
            let p = Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            let m = if k < n_a { a } else { b };
            let mut q = m.transform_point(&p);
            if noise > 0.0 {
                q += Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            }
            c.push(q, p);
        }
        c
    }

    #[test]
    fn two_motions_are_both_extracted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Pose::from_axis_angle(Vector3::new(0.0, 0.3, 0.0), Vector3::new(0.05, 0.0, 0.4));
        let b = Pose::from_axis_angle(Vector3::new(0.4, 0.0, 0.1), Vector3::new(-0.05, 0.02, 0.45));
        let c = two_motion_set(&mut rng, &a, &b, 60, 40, 0.0);
        let cfg = RansacConfig { inlier_threshold: 0.001, ..Default::default() };
        let hyps = sequential_ransac(&c, &cfg).unwrap();
        assert_eq!(hyps.len(), 2);
        assert!(hyps[0].pose.max_abs_diff(&a) < 1e-6);
        assert!(hyps[1].pose.max_abs_diff(&b) < 1e-6);
        assert_eq!(hyps[0].inlier_count(), 60);
        assert_eq!(hyps[1].inlier_count(), 40);
    }

    #[test]
    fn consensus_sets_are_disjoint_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let c = two_motion_set(&mut rng, &a, &b, 30, 30, 0.002);
        let cfg = RansacConfig { rng_seed: 42, ..Default::default() };
        let h1 = sequential_ransac(&c, &cfg).unwrap();
        let h2 = sequential_ransac(&c, &cfg).unwrap();
        assert_eq!(h1, h2);
        let mut seen = std::collections::HashSet::new();
        for h in &h1 {
            for &i in &h.inliers {
                assert!(seen.insert(i), "index {i} in two consensus sets");
            }
        }
    }

    #[test]
    fn single_hypothesis_fit_follows_the_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Pose::from_axis_angle(Vector3::new(0.0, 0.3, 0.0), Vector3::new(0.05, 0.0, 0.4));
        let b = Pose::from_axis_angle(Vector3::new(0.4, 0.0, 0.1), Vector3::new(-0.05, 0.02, 0.45));
        let c = two_motion_set(&mut rng, &a, &b, 60, 40, 0.0);
        let single = two_step_fit(&c, 0.01).unwrap();
        assert!(single.pose.max_abs_diff(&b) > 1e-2);
        let hyps = sequential_ransac(&c, &RansacConfig { inlier_threshold: 0.001, ..Default::default() }).unwrap();
        assert!(hyps.iter().any(|h| h.pose.max_abs_diff(&b) < 1e-6));
    }

    fn fused_box() -> (TsdfVolume, PointCloud, Pose) {
        // Box of half-size 4 cm seen from several views; the dense cloud is a
        // sample of its front faces in the camera frame.
        let half = Vector3::new(0.04, 0.03, 0.035);
        let sdf = move |p: &Vector3<f64>| {
            let q = p.abs() - half;
            q.sup(&Vector3::zeros()).norm() + q.max().min(0.0)
        };
        let cam = CameraModel::new(300.0, 300.0, 80.0, 80.0, 161, 161).unwrap();
        let center = Vector3::new(0.0, 0.0, 0.5);
        let mut vol = TsdfVolume::new(Vector3::new(-0.08, -0.08, 0.42), 0.004, [41, 41, 41], 0.012).unwrap();
        let render = |view: &Pose| {
            // view maps object (box-centered) frame to camera
            let mut depth = vec![0.0f32; cam.pixel_count()];
            let inv = view.inverse();
            for r in 0..cam.height {
                for col in 0..cam.width {
                    let dir = Vector3::new((col as f64 - cam.cx) / cam.fx, (r as f64 - cam.cy) / cam.fy, 1.0);
                    let mut t = 0.3;
                    for _ in 0..200 {
                        let d = sdf(&inv.transform_point(&(dir * t)));
                        if d < 1e-6 {
                            depth[r * cam.width + col] = t as f32;
                            break;
                        }
                        t += d;
                        if t > 1.0 {
                            break;
                        }
                    }
                }
            }
            depth
        };
        let mut cloud = PointCloud::default();
        for v in 0..6 {
            let ang = v as f64 * 0.5 - 1.25;
            let view = Pose::from_axis_angle(Vector3::new(0.2, ang, 0.0), center);
            let depth = render(&view);
            let mask: Vec<bool> = depth.iter().map(|d| *d > 0.0).collect();
            // volume lives in a frame coincident with the camera at the
            // reference view: object frame = view 0
            let obs = DepthObservation { camera: cam, depth: depth.clone(), mask, color: None, pose: view.compose(&Pose::from_translation(-center)) };
            vol.integrate(&obs).unwrap();
            if v == 2 {
                for r in (0..cam.height).step_by(3) {
                    for col in (0..cam.width).step_by(3) {
                        let d = depth[r * cam.width + col] as f64;
                        if d > 0.0 {
                            cloud.points.push(cam.back_project(&nalgebra::Vector2::new(col as f64, r as f64), d).unwrap());
                        }
                    }
                }
            }
        }
        let ang = 2.0 * 0.5 - 1.25;
        let true_pose = Pose::from_axis_angle(Vector3::new(0.2, ang, 0.0), center).compose(&Pose::from_translation(-center));
        (vol, cloud, true_pose)
    }

    #[test]
    fn selection_prefers_the_true_pose() {
        let (vol, cloud, truth) = fused_box();
        let shifted = truth.compose(&Pose::from_translation(Vector3::new(0.05, 0.0, 0.0)));
        let hyps = vec![
            PoseHypothesis { pose: shifted, inliers: vec![0, 1, 2, 3] },
            PoseHypothesis { pose: truth, inliers: vec![4, 5, 6] },
        ];
        let sel = select_hypothesis(&hyps, &cloud, &vol).unwrap();
        assert_eq!(sel.index, 1);
        assert!(sel.scores[0] - sel.scores[1] > 0.1, "scores {:?}", sel.scores);
    }

    #[test]
    fn selection_edge_cases() {
        let (vol, cloud, truth) = fused_box();
        let far = Pose::from_translation(Vector3::new(5.0, 0.0, 0.0));
        let one = vec![PoseHypothesis { pose: far, inliers: vec![0, 1, 2] }];
        let sel = select_hypothesis(&one, &cloud, &vol).unwrap();
        assert_eq!(sel.index, 0);
        assert_eq!(sel.score, OUT_OF_VOLUME_PENALTY);
        let twins = vec![
            PoseHypothesis { pose: truth, inliers: (0..10).collect() },
            PoseHypothesis { pose: truth, inliers: (10..30).collect() },
        ];
        assert_eq!(select_hypothesis(&twins, &cloud, &vol).unwrap().index, 1);
        assert_eq!(select_hypothesis(&[], &cloud, &vol), Err(RegistrationError::NoHypotheses));
        assert_eq!(select_hypothesis(&twins, &PointCloud::default(), &vol), Err(RegistrationError::EmptyCloud));
        let empty = TsdfVolume::new(Vector3::zeros(), 0.01, [3, 3, 3], 0.03).unwrap();
        assert_eq!(select_hypothesis(&twins, &cloud, &empty), Err(RegistrationError::EmptyVolume));
    }
}
