//! Keypoint map lifecycle: sampling new track queries, deciding when to
//! sample, verifying pending points and promoting them into the map.

use nalgebra::{Vector2, Vector3};

use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub pixel: Vector2<f64>,
    /// Trackability in [0, 1].
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub lambda: f64,
    pub r_ideal: f64,
    pub r_min: f64,
    pub beta: f64,
    pub k: usize,
    /// Radians.
    pub rotation_trigger: f64,
    pub min_visible_trigger: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            r_ideal: 40.0,
            r_min: 10.0,
            beta: 1.0,
            k: 30,
            rotation_trigger: 10f64.to_radians(),
            min_visible_trigger: 25,
        }
    }
}

impl SamplerConfig {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.lambda)
            && self.r_min > 0.0
            && self.r_min <= self.r_ideal
            && self.beta >= 0.0
            && self.rotation_trigger > 0.0
    }
}

/// Sampling objective for a candidate at distance `d` from the nearest
/// existing or already picked point.
pub fn objective(score: f64, d: f64, cfg: &SamplerConfig) -> f64 {
    let spread = if d.is_finite() { (d / cfg.r_ideal).min(1.0) } else { 1.0 };
    let crowding = if d.is_finite() { ((cfg.r_min - d) / cfg.r_min).max(0.0) } else { 0.0 };
    cfg.lambda * score + (1.0 - cfg.lambda) * spread - cfg.beta * crowding
}

/// Greedy selection of up to `cfg.k` candidates, in pick order.
pub fn greedy_sample(
    cands: &[Candidate],
    existing: &[Vector2<f64>],
    cfg: &SamplerConfig,
) -> Vec<Candidate> {
    // nearest[i]: distance from candidate i to the current anchor set
    let mut nearest: Vec<f64> = cands
        .iter()
        .map(|c| {
            existing
                .iter()
                .map(|e| (c.pixel - e).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; cands.len()];
    let mut out = Vec::with_capacity(cfg.k.min(cands.len()));

    while out.len() < cfg.k {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in cands.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let j = objective(c.score, nearest[i], cfg);
            let better = match best {
                None => true,
                Some((b, bj)) => j > bj || (j == bj && c.score > cands[b].score),
            };
            if better {
                best = Some((i, j));
            }
        }
        let Some((i, _)) = best else { break };
        taken[i] = true;
        let p = cands[i].pixel;
        for (n, c) in nearest.iter_mut().zip(cands) {
            *n = n.min((c.pixel - p).norm());
        }
        out.push(cands[i]);
    }
    out
}

pub fn should_sample(rotation_since_keyframes: f64, visible_count: usize, cfg: &SamplerConfig) -> bool {
    rotation_since_keyframes > cfg.rotation_trigger || visible_count < cfg.min_visible_trigger
}

/// Smallest geodesic rotation distance from `current` to any keyframe pose;
/// infinite when there are none.
pub fn rotation_to_keyframes<'a>(current: &Pose, keyframes: impl IntoIterator<Item = &'a Pose>) -> f64 {
    keyframes
        .into_iter()
        .map(|k| current.rotation_distance(k))
        .fold(f64::INFINITY, f64::min)
}

/// True when the pixel and its 4-neighbours all lie inside the mask.
pub fn strictly_inside_mask(mask: &[bool], width: usize, height: usize, col: usize, row: usize) -> bool {
    if col == 0 || row == 0 || col + 1 >= width || row + 1 >= height {
        return false;
    }
    let at = |c: usize, r: usize| mask[r * width + c];
    at(col, row) && at(col - 1, row) && at(col + 1, row) && at(col, row - 1) && at(col, row + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingChecks {
    /// Radians.
    pub max_rotation: f64,
    pub max_translation: f64,
    pub max_uncertainty: f64,
}

impl Default for PendingChecks {
    fn default() -> Self {
        Self {
            max_rotation: 2f64.to_radians(),
            max_translation: 0.01,
            max_uncertainty: 0.3,
        }
    }
}

/// What one frame says about a pending point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEvidence {
    /// Change of the object pose estimate since the previous frame.
    pub pose_delta: Pose,
    pub visible: bool,
    pub depth_valid: bool,
    pub uncertainty: f64,
    pub inside_mask: bool,
    /// Lifted observation in the object frame.
    pub point: Vector3<f64>,
}

impl FrameEvidence {
    pub fn passes(&self, checks: &PendingChecks) -> bool {
        self.pose_delta.rotation_angle() < checks.max_rotation
            && self.pose_delta.translation.norm() < checks.max_translation
            && self.visible
            && self.depth_valid
            && self.uncertainty < checks.max_uncertainty
            && self.inside_mask
            && self.point.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingPoint {
    pub track_id: usize,
    pub observations: Vec<Vector3<f64>>,
    pub streak: usize,
    pub created_frame: usize,
}

impl PendingPoint {
    pub fn new(track_id: usize, created_frame: usize) -> Self {
        Self {
            track_id,
            observations: Vec::new(),
            streak: 0,
            created_frame,
        }
    }

    /// Applies one frame of evidence; returns whether all checks passed.
    pub fn update(&mut self, ev: &FrameEvidence, checks: &PendingChecks) -> bool {
        if ev.passes(checks) {
            self.streak += 1;
            self.observations.push(ev.point);
            true
        } else {
            self.streak = 0;
            false
        }
    }

    pub fn reset_streak(&mut self) {
        self.streak = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub track_id: usize,
    pub position: Vector3<f64>,
    pub source_keyframe: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromotionConfig {
    pub n_streak: usize,
    pub mad_threshold: f64,
    pub min_obs: usize,
}

impl Default for PromotionConfig {
    fn default() -> Self {
        Self {
            n_streak: 3,
            mad_threshold: 0.008,
            min_obs: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rejection {
    ShortStreak(usize),
    TooFewObservations(usize),
    Unstable { mad: f64 },
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Componentwise median.
pub fn median_point(obs: &[Vector3<f64>]) -> Vector3<f64> {
    Vector3::from_fn(|k, _| median(&mut obs.iter().map(|p| p[k]).collect::<Vec<_>>()))
}

/// Median of distances to the componentwise median.
pub fn median_abs_deviation(obs: &[Vector3<f64>]) -> f64 {
    let m = median_point(obs);
    median(&mut obs.iter().map(|p| (p - m).norm()).collect::<Vec<_>>())
}

pub fn try_promote(pp: &PendingPoint, cfg: &PromotionConfig, source_keyframe: usize) -> Result<Keypoint, Rejection> {
    if pp.streak < cfg.n_streak {
        return Err(Rejection::ShortStreak(pp.streak));
    }
    if pp.observations.len() < cfg.min_obs.max(1) {
        return Err(Rejection::TooFewObservations(pp.observations.len()));
    }
    let mad = median_abs_deviation(&pp.observations);
    if mad >= cfg.mad_threshold {
        return Err(Rejection::Unstable { mad });
    }
    Ok(Keypoint {
        track_id: pp.track_id,
        position: median_point(&pp.observations),
        source_keyframe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cand(x: f64, y: f64, s: f64) -> Candidate {
        Candidate { pixel: Vector2::new(x, y), score: s }
    }

    fn good_evidence() -> FrameEvidence {
        FrameEvidence {
            pose_delta: Pose::identity(),
            visible: true,
            depth_valid: true,
            uncertainty: 0.1,
            inside_mask: true,
            point: Vector3::new(0.01, 0.02, 0.03),
        }
    }

    #[test]
    fn lambda_one_orders_by_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands: Vec<_> = (0..40)
            .map(|_| cand(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0), rng.gen_range(0.0..1.0)))
            .collect();
        let cfg = SamplerConfig { lambda: 1.0, beta: 0.0, k: 40, ..Default::default() };
        let picked = greedy_sample(&cands, &[], &cfg);
        assert_eq!(picked.len(), 40);
        assert!(picked.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn coincident_candidate_objective() {
        let cfg = SamplerConfig::default();
        assert!((objective(1.0, 0.0, &cfg) + 0.5).abs() < 1e-15);
        assert_eq!(objective(0.4, f64::INFINITY, &cfg), 0.2 + 0.5);
    }

    #[test]
    fn fewer_candidates_than_k_returns_all() {
        let cands = [cand(0.0, 0.0, 0.2), cand(50.0, 0.0, 0.9)];
        let picked = greedy_sample(&cands, &[], &SamplerConfig::default());
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0], cands[1]);
        assert!(greedy_sample(&[], &[], &SamplerConfig::default()).is_empty());
    }

    /// Independent greedy: recompute every distance from scratch each round.
    fn brute_force(cands: &[Candidate], existing: &[Vector2<f64>], cfg: &SamplerConfig) -> Vec<usize> {
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < cfg.k && picked.len() < cands.len() {
            let mut scored: Vec<(usize, f64)> = (0..cands.len())
                .filter(|i| !picked.contains(i))
                .map(|i| {
                    let anchors = existing.iter().copied().chain(picked.iter().map(|&j| cands[j].pixel));
                    let d = anchors.map(|a| (cands[i].pixel - a).norm()).fold(f64::INFINITY, f64::min);
                    let spread = if d.is_infinite() { 1.0 } else { (d / cfg.r_ideal).min(1.0) };
                    let rho = if d.is_infinite() { 0.0 } else { ((cfg.r_min - d) / cfg.r_min).max(0.0) };
                    (i, cfg.lambda * cands[i].score + (1.0 - cfg.lambda) * spread - cfg.beta * rho)
                })
                .collect();
            scored.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then(cands[b.0].score.total_cmp(&cands[a.0].score))
                    .then(a.0.cmp(&b.0))
            });
            picked.push(scored[0].0);
        }
        picked
    }

    #[test]
    fn matches_brute_force_greedy() {
        let cfg = SamplerConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cands: Vec<_> = (0..100)
                .map(|_| cand(rng.gen_range(0.0..240.0), rng.gen_range(0.0..240.0), rng.gen_range(0.0..1.0)))
                .collect();
            let existing: Vec<_> = (0..(seed as usize % 5))
                .map(|_| Vector2::new(rng.gen_range(0.0..240.0), rng.gen_range(0.0..240.0)))
                .collect();
            let fast = greedy_sample(&cands, &existing, &cfg);
            let slow: Vec<_> = brute_force(&cands, &existing, &cfg).into_iter().map(|i| cands[i]).collect();
            assert_eq!(fast, slow, "seed {seed}");
        }
    }

    #[test]
    fn equal_scores_respect_minimum_spacing_on_dense_grid() {
        // 3 px lattice, far denser than r_min, with one existing point.
        let cands: Vec<_> = (0..60)
            .flat_map(|i| (0..60).map(move |j| cand(i as f64 * 3.0, j as f64 * 3.0, 0.7)))
            .collect();
        let existing = [Vector2::new(90.0, 90.0)];
        let cfg = SamplerConfig::default();
        let picked = greedy_sample(&cands, &existing, &cfg);
        assert_eq!(picked.len(), cfg.k);
        for (a, pa) in picked.iter().enumerate() {
            assert!((pa.pixel - existing[0]).norm() >= cfg.r_min);
            for pb in &picked[a + 1..] {
                assert!((pa.pixel - pb.pixel).norm() >= cfg.r_min);
            }
        }
    }

    #[test]
    fn high_score_can_outweigh_crowding() {
        let cfg = SamplerConfig { k: 1, ..Default::default() };
        let existing = [Vector2::new(0.0, 0.0)];
        let cands = [cand(9.9, 0.0, 1.0), cand(100.0, 0.0, 0.0)];
        assert_eq!(greedy_sample(&cands, &existing, &cfg)[0], cands[0]);
    }

    #[test]
    fn sampling_triggers() {
        let cfg = SamplerConfig::default();
        assert!(should_sample(11f64.to_radians(), 100, &cfg));
        assert!(should_sample(0.0, 24, &cfg));
        assert!(!should_sample(5f64.to_radians(), 25, &cfg));
    }

    #[test]
    fn rotation_is_measured_against_all_keyframes() {
        let kf = [
            Pose::identity(),
            Pose::from_axis_angle(Vector3::new(0.0, 0.0, 20f64.to_radians()), Vector3::zeros()),
        ];
        let cur = Pose::from_axis_angle(Vector3::new(0.0, 0.0, 18f64.to_radians()), Vector3::zeros());
        assert!((rotation_to_keyframes(&cur, &kf).to_degrees() - 2.0).abs() < 1e-9);
        assert_eq!(rotation_to_keyframes(&cur, &[]), f64::INFINITY);
    }

    #[test]
    fn mask_interior_requires_four_neighbours() {
        let (w, h) = (5, 5);
        let mut mask = vec![false; w * h];
        for r in 1..4 {
            for c in 1..4 {
                mask[r * w + c] = true;
            }
        }
        assert!(strictly_inside_mask(&mask, w, h, 2, 2));
        assert!(!strictly_inside_mask(&mask, w, h, 1, 2));
        assert!(!strictly_inside_mask(&mask, w, h, 0, 0));
    }

    #[test]
    fn pending_streak_updates() {
        let checks = PendingChecks::default();
        let mut pp = PendingPoint::new(7, 0);
        pp.update(&good_evidence(), &checks);
        assert_eq!(pp.streak, 1);
        pp.update(&good_evidence(), &checks);
        assert_eq!(pp.streak, 2);
        assert_eq!(pp.observations.len(), 2);

        let mut bad = good_evidence();
        bad.uncertainty = 0.35;
        pp.update(&bad, &checks);
        assert_eq!(pp.streak, 0);
        assert_eq!(pp.observations.len(), 2);

        pp.update(&good_evidence(), &checks);
        let mut rotated = good_evidence();
        rotated.pose_delta = Pose::from_axis_angle(Vector3::new(3f64.to_radians(), 0.0, 0.0), Vector3::zeros());
        pp.update(&rotated, &checks);
        assert_eq!(pp.streak, 0);

        for ev in [
            FrameEvidence { visible: false, ..good_evidence() },
            FrameEvidence { depth_valid: false, ..good_evidence() },
            FrameEvidence { inside_mask: false, ..good_evidence() },
            FrameEvidence { pose_delta: Pose::from_translation(Vector3::new(0.011, 0.0, 0.0)), ..good_evidence() },
        ] {
            let mut p = PendingPoint::new(0, 0);
            p.update(&good_evidence(), &checks);
            p.update(&ev, &checks);
            assert_eq!(p.streak, 0);
        }
    }

    #[test]
    fn promotion_rules() {
        let cfg = PromotionConfig::default();
        let base = Vector3::new(0.1, 0.0, 0.05);
        let mut pp = PendingPoint::new(3, 0);
        pp.streak = 3;
        pp.observations = vec![base, base + Vector3::new(0.001, 0.0, 0.0), base - Vector3::new(0.0, 0.0005, 0.0)];
        let kp = try_promote(&pp, &cfg, 4).unwrap();
        assert_eq!(kp.track_id, 3);
        assert_eq!(kp.source_keyframe, 4);
        assert!((kp.position - base).norm() < 1e-12);

        let mut short = pp.clone();
        short.streak = 2;
        assert_eq!(try_promote(&short, &cfg, 0), Err(Rejection::ShortStreak(2)));

        let mut spread = pp.clone();
        spread.observations = vec![
            base,
            base + Vector3::new(0.01, 0.0, 0.0),
            base - Vector3::new(0.01, 0.0, 0.0),
            base + Vector3::new(0.0, 0.01, 0.0),
            base - Vector3::new(0.0, 0.01, 0.0),
        ];
        assert!(matches!(try_promote(&spread, &cfg, 0), Err(Rejection::Unstable { mad }) if (mad - 0.01).abs() < 1e-12));
    }

    fn arb_evidence() -> impl Strategy<Value = FrameEvidence> {
        (any::<bool>(), any::<bool>(), 0.0f64..0.5, any::<bool>(), 0.0f64..0.05).prop_map(|(v, d, u, m, rot)| {
            FrameEvidence {
                pose_delta: Pose::from_axis_angle(Vector3::new(rot, 0.0, 0.0), Vector3::zeros()),
                visible: v,
                depth_valid: d,
                uncertainty: u,
                inside_mask: m,
                point: Vector3::new(u, rot, 0.0),
            }
        })
    }

    proptest! {
        #[test]
        fn streak_is_passing_suffix_length(seq in prop::collection::vec(arb_evidence(), 0..40)) {
            let checks = PendingChecks::default();
            let mut pp = PendingPoint::new(0, 0);
            for ev in &seq {
                pp.update(ev, &checks);
            }
            let suffix = seq.iter().rev().take_while(|e| e.passes(&checks)).count();
            prop_assert_eq!(pp.streak, suffix);
        }

        #[test]
        fn promoted_position_is_permutation_invariant(
            pts in prop::collection::vec((-0.003f64..0.003, -0.003f64..0.003, -0.003f64..0.003), 3..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let obs: Vec<_> = pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
            let mut shuffled = obs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut a = PendingPoint::new(0, 0);
            a.streak = 5;
            a.observations = obs;
            let mut b = a.clone();
            b.observations = shuffled;
            let cfg = PromotionConfig::default();
            prop_assert_eq!(try_promote(&a, &cfg, 0), try_promote(&b, &cfg, 0));
        }
    }
}
