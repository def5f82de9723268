//! Dense pose refinement against the fused TSDF.
//!
//! The camera-frame cloud is pulled onto the zero level set by
//! Levenberg-Marquardt on a left twist perturbation `D = exp(ξ)`, with the
//! update `T ← D T`. The robust loss takes the squared residual `s = Φ²`:
//! `ρ(s) = s` for `s ≤ δ²` and `2δ√s − δ²` beyond, which is the Huber loss on
//! `Φ`; it is minimized by iteratively reweighted least squares.

use nalgebra::{Matrix6, RowVector6, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{se3_exp, PointCloud, Pose, Twist};
use crate::tsdf::TsdfVolume;

/// Invalid samples count as if they sat at the truncation boundary.
const INVALID_RESIDUAL: f64 = 1.0;

/// Maximum share of invalid samples at the initial pose.
pub const MAX_INVALID_FRACTION: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("TSDF volume has no fused observations")]
    EmptyVolume,
    #[error("{invalid} of {total} points fall outside the observed volume")]
    Unreliable { invalid: usize, total: usize },
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub huber_delta: f64,
    pub lm_initial_lambda: f64,
    pub lm_lambda_factor: f64,
    pub convergence_tol: f64,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 10,
            max_inner_iterations: 20,
            huber_delta: 0.5,
            lm_initial_lambda: 1e-3,
            lm_lambda_factor: 10.0,
            convergence_tol: 1e-6,
            max_points: 2000,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let ok = self.max_outer_iterations >= 1
            && self.max_inner_iterations >= 1
            && self.huber_delta > 0.0
            && self.lm_initial_lambda > 0.0
            && self.lm_lambda_factor > 1.0
            && self.convergence_tol > 0.0
            && self.max_points >= 1;
        if ok {
            Ok(())
        } else {
            Err(RefineError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub pose: Pose,
    pub initial_cost: f64,
    pub cost: f64,
    /// Outer iterations run.
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

/// `ρ(s)` on the squared residual.
pub fn huber_on_squared(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

/// IRLS weight `ρ'(s)`.
fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

/// Robust cost of `pose` over `points`; unobserved samples cost `ρ(1)`.
pub fn robust_cost(pose: &Pose, points: &[Vector3<f64>], vol: &TsdfVolume, delta: f64) -> f64 {
    let inv = pose.inverse();
    points
        .iter()
        .map(|p| {
            let phi = vol
                .sample(&inv.transform_point(p))
                .unwrap_or(INVALID_RESIDUAL);
            huber_on_squared(phi * phi, delta)
        })
        .sum()
}

/// Residual `Φ(T⁻¹ D⁻¹ p)` at `D = I` and its Jacobian with respect to the
/// twist of `D`, `None` when the sample or its gradient is unobserved.
pub fn residual_jacobian(
    pose: &Pose,
    p: &Vector3<f64>,
    vol: &TsdfVolume,
) -> Option<(f64, RowVector6<f64>)> {
    let inv = pose.inverse();
    let q = inv.transform_point(p);
    let phi = vol.sample(&q)?;
    let g = vol.gradient(&q)?;
    // d(D⁻¹p)/dξ = [p^, −I]; the object-frame gradient rotates into camera axes.
    let n = pose.rotation * g;
    let jw = n.cross(p);
    Some((phi, RowVector6::new(jw.x, jw.y, jw.z, -n.x, -n.y, -n.z)))
}

fn subsample(cloud: &PointCloud, max_points: usize, seed: u64) -> Vec<Vector3<f64>> {
    if cloud.len() <= max_points {
        return cloud.points.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, cloud.len(), max_points).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cloud.points[i]).collect()
}

fn count_invalid(pose: &Pose, points: &[Vector3<f64>], vol: &TsdfVolume) -> usize {
    let inv = pose.inverse();
    points
        .iter()
        .filter(|p| vol.sample(&inv.transform_point(p)).is_none())
        .count()
}

/// Refines an object→camera pose so the camera-frame cloud lies on the
/// fused surface. The returned cost never exceeds the initial one.
pub fn refine_pose(
    initial: &Pose,
    cloud: &PointCloud,
    vol: &TsdfVolume,
    cfg: &RefineConfig,
) -> Result<RefineResult, RefineError> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(RefineError::EmptyCloud);
    }
    if vol.fused_frames() == 0 {
        return Err(RefineError::EmptyVolume);
    }
    let points = subsample(cloud, cfg.max_points, cfg.seed);
    let invalid = count_invalid(initial, &points, vol);
    if invalid as f64 > MAX_INVALID_FRACTION * points.len() as f64 {
        return Err(RefineError::Unreliable {
            invalid,
            total: points.len(),
        });
    }

    let delta = cfg.huber_delta;
    let mut pose = *initial;
    let mut cost = robust_cost(&pose, &points, vol, delta);
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = cfg.lm_initial_lambda;
    let mut iterations = 0;

    for _ in 0..cfg.max_outer_iterations {
        iterations += 1;
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for p in &points {
            if let Some((phi, j)) = residual_jacobian(&pose, p, vol) {
                let w = huber_weight(phi * phi, delta);
                h += j.transpose() * j * w;
                b += j.transpose() * (phi * w);
            }
        }
        if h.diagonal().max() <= 0.0 {
            break;
        }
        let mut step_norm = None;
        for _ in 0..cfg.max_inner_iterations {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(xi) = damped.cholesky().map(|c| c.solve(&(-b))) else {
                lambda *= cfg.lm_lambda_factor;
                continue;
            };
            let candidate = se3_exp(&Twist::from_vector(&xi)).compose(&pose);
            let c = robust_cost(&candidate, &points, vol, delta);
            if c < cost {
                pose = candidate;
                cost = c;
                trace.push(c);
                lambda = (lambda / cfg.lm_lambda_factor).max(1e-12);
                step_norm = Some(xi.norm());
                break;
            }
            lambda *= cfg.lm_lambda_factor;
        }
        match step_norm {
            Some(n) if n >= cfg.convergence_tol => {}
            _ => break,
        }
    }

    Ok(RefineResult {
        pose,
        initial_cost,
        cost,
        iterations,
        cost_trace: trace,
    })
}
