//! Keyframe pose graph with landmark bearing-range factors.
//!
//! Pose variables `X_m` map camera coordinates of keyframe `m` into the
//! object frame; the camera-frame prediction of landmark `p_n` is `X_m⁻¹ p_n`.
//! Poses are retracted on the left, `X ← exp(δ) X`, landmarks additively.
//! Cost terms are squared Mahalanobis norms with no ½ factor; odometry and
//! observation terms pass through the Huber loss in whitened units.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, Matrix6x3, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{hat, se3_exp, se3_left_jacobian_inv, se3_right_jacobian_inv, GeometryError, Pose, Twist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("bearing of a point at distance {0:e} is undefined")]
    DegenerateBearing(f64),
    #[error("predicted and measured bearings are antipodal")]
    Antipodal,
    #[error("relative pose log failed: {0}")]
    Geometry(#[from] GeometryError),
    #[error("factor references missing variable: {0}")]
    InvalidReference(String),
    #[error("landmark {0} has no observations")]
    UnobservedLandmark(usize),
    #[error("covariance is not positive definite: {0}")]
    BadCovariance(&'static str),
    #[error("graph has no keyframes")]
    Empty,
    #[error("normal equations stayed indefinite after damping")]
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub keyframe: usize,
    pub landmark: usize,
    /// Measured landmark position in the keyframe's camera frame.
    pub measurement: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryEdge {
    pub from: usize,
    pub to: usize,
    /// Measured `X_from⁻¹ X_to`.
    pub measurement: Pose,
    pub covariance: Matrix6<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphState {
    pub poses: Vec<Pose>,
    pub landmarks: Vec<Vector3<f64>>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub prior: Matrix6<f64>,
    pub odometry: Matrix6<f64>,
    /// Over (two tangent coordinates, range).
    pub observation: Matrix3<f64>,
    pub huber_delta: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        let rot = 1f64.to_radians().powi(2);
        let trans = 0.005f64.powi(2);
        let bearing = 0.5f64.to_radians().powi(2);
        Self {
            prior: Matrix6::identity() * 1e-6,
            odometry: Matrix6::from_diagonal(&Vector6::new(rot, rot, rot, trans, trans, trans)),
            observation: Matrix3::from_diagonal(&Vector3::new(bearing, bearing, trans)),
            huber_delta: 1.345,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_lambda: f64,
    /// Stop once an accepted step improves the cost by less than this fraction.
    pub relative_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_lambda: 1e12,
            relative_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_steps: usize,
    pub cost_trace: Vec<f64>,
}

// ---------------------------------------------------------------------------
// bearing-range measurement model

pub fn bearing_range(p: &Vector3<f64>) -> Result<(Vector3<f64>, f64), GraphError> {
    let r = p.norm();
    if r <= 1e-9 || !r.is_finite() {
        return Err(GraphError::DegenerateBearing(r));
    }
    Ok((p / r, r))
}

/// Deterministic orthonormal basis of the tangent plane at `b`.
pub fn tangent_basis(b: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let k = b.iamin();
    let e = Vector3::ith(k, 1.0);
    let u1 = b.cross(&e).normalize();
    let u2 = b.cross(&u1);
    (u1, u2)
}

const ANTIPODAL_MARGIN: f64 = 1e-9;
const SERIES_SWITCH: f64 = 1e-4;

/// `θ/sin θ` as a function of `c = cos θ`, and its derivative in `c`.
fn log_scale(c: f64) -> (f64, f64) {
    let x = 1.0 - c;
    if x < SERIES_SWITCH {
        (1.0 + x / 3.0 + 2.0 * x * x / 15.0, -1.0 / 3.0 - 4.0 * x / 15.0)
    } else {
        let s = (1.0 - c * c).sqrt();
        let theta = c.acos();
        (theta / s, (-1.0 + theta * c / s) / (s * s))
    }
}

/// Residual between predicted `(b, r)` and measured `(b̃, r̃)`: tangent
/// coordinates of the sphere log of `b` at `b̃`, then `r̃ − r`.
pub fn br_residual(predicted: (Vector3<f64>, f64), measured: (Vector3<f64>, f64)) -> Result<Vector3<f64>, GraphError> {
    let (b, r) = predicted;
    let (bm, rm) = measured;
    let c = bm.dot(&b).clamp(-1.0, 1.0);
    if c < -1.0 + ANTIPODAL_MARGIN {
        return Err(GraphError::Antipodal);
    }
    let (u1, u2) = tangent_basis(&bm);
    let (f, _) = log_scale(c);
    // Uᵀb̃ = 0, so differencing first is exact for equal bearings.
    let d = b - bm;
    Ok(Vector3::new(f * u1.dot(&d), f * u2.dot(&d), rm - r))
}

/// Observation residual and its Jacobian with respect to the camera-frame
/// prediction `q`.
fn observation_residual(q: &Vector3<f64>, measured: &Vector3<f64>) -> Result<(Vector3<f64>, Matrix3<f64>), GraphError> {
    let (b, r) = bearing_range(q)?;
    let (bm, rm) = bearing_range(measured)?;
    let c = bm.dot(&b).clamp(-1.0, 1.0);
    if c < -1.0 + ANTIPODAL_MARGIN {
        return Err(GraphError::Antipodal);
    }
    let (u1, u2) = tangent_basis(&bm);
    let (f, df) = log_scale(c);
    let d = b - bm;
    let ut_b = nalgebra::Vector2::new(u1.dot(&d), u2.dot(&d));
    let res = Vector3::new(f * ut_b.x, f * ut_b.y, rm - r);

    let db_dq = (Matrix3::identity() - b * b.transpose()) / r;
    let ut = nalgebra::Matrix2x3::from_rows(&[u1.transpose(), u2.transpose()]);
    let dy_db = ut * f + ut_b * bm.transpose() * df;
    let dy_dq = dy_db * db_dq;
    let mut j = Matrix3::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&dy_dq);
    j.set_row(2, &(-b.transpose()));
    Ok((res, j))
}

// ---------------------------------------------------------------------------
// robust loss and whitening

fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

/// Square-root information matrices.
#[derive(Debug, Clone, Copy)]
struct Whitening {
    prior: Matrix6<f64>,
    observation: Matrix3<f64>,
}

fn sqrt_info6(cov: &Matrix6<f64>, what: &'static str) -> Result<Matrix6<f64>, GraphError> {
    let l = cov.cholesky().ok_or(GraphError::BadCovariance(what))?.l();
    l.try_inverse().ok_or(GraphError::BadCovariance(what))
}

fn sqrt_info3(cov: &Matrix3<f64>, what: &'static str) -> Result<Matrix3<f64>, GraphError> {
    let l = cov.cholesky().ok_or(GraphError::BadCovariance(what))?.l();
    l.try_inverse().ok_or(GraphError::BadCovariance(what))
}

impl Whitening {
    fn new(noise: &NoiseModel) -> Result<Self, GraphError> {
        sqrt_info6(&noise.odometry, "odometry")?;
        Ok(Self {
            prior: sqrt_info6(&noise.prior, "prior")?,
            observation: sqrt_info3(&noise.observation, "observation")?,
        })
    }
}

// ---------------------------------------------------------------------------
// factor residuals and Jacobians

pub fn prior_residual(x0: &Pose) -> Result<(Vector6<f64>, Matrix6<f64>), GraphError> {
    let r = x0.log()?;
    Ok((r.to_vector(), se3_left_jacobian_inv(&r)))
}

/// Residual `log(Z⁻¹ X_from⁻¹ X_to)` and Jacobians for the `from` and `to`
/// perturbations.
pub fn odometry_residual(
    x_from: &Pose,
    x_to: &Pose,
    z: &Pose,
) -> Result<(Vector6<f64>, Matrix6<f64>, Matrix6<f64>), GraphError> {
    let e = z.inverse().compose(&x_from.inverse()).compose(x_to);
    let r = e.log()?;
    let j_to = se3_right_jacobian_inv(&r) * x_to.inverse().adjoint();
    Ok((r.to_vector(), -j_to, j_to))
}

/// Residual of one landmark observation and Jacobians with respect to the
/// keyframe pose perturbation and the landmark position.
pub fn landmark_residual(
    x: &Pose,
    p: &Vector3<f64>,
    measured: &Vector3<f64>,
) -> Result<(Vector3<f64>, Matrix3x6<f64>, Matrix3<f64>), GraphError> {
    let q = x.inverse().transform_point(p);
    let (res, dr_dq) = observation_residual(&q, measured)?;
    let rt = x.rotation.transpose();
    let mut dq_dx = Matrix3x6::zeros();
    dq_dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rt * hat(p)));
    dq_dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt));
    Ok((res, dr_dq * dq_dx, dr_dq * rt))
}

fn check_references(g: &GraphState, edges: &[OdometryEdge]) -> Result<(), GraphError> {
    if g.poses.is_empty() {
        return Err(GraphError::Empty);
    }
    let np = g.poses.len();
    for e in edges {
        if e.from >= np || e.to >= np {
            return Err(GraphError::InvalidReference(format!("odometry {} -> {}", e.from, e.to)));
        }
    }
    for o in &g.observations {
        if o.keyframe >= np || o.landmark >= g.landmarks.len() {
            return Err(GraphError::InvalidReference(format!("observation X{} L{}", o.keyframe, o.landmark)));
        }
    }
    Ok(())
}

fn cost_with(g: &GraphState, edges: &[OdometryEdge], w: &Whitening, delta: f64) -> Result<f64, GraphError> {
    let (r, _) = prior_residual(&g.poses[0])?;
    let mut cost = (w.prior * r).norm_squared();
    for e in edges {
        let sqrt_info = sqrt_info6(&e.covariance, "odometry edge")?;
        let (r, _, _) = odometry_residual(&g.poses[e.from], &g.poses[e.to], &e.measurement)?;
        cost += huber((sqrt_info * r).norm_squared(), delta);
    }
    for o in &g.observations {
        let q = g.poses[o.keyframe].inverse().transform_point(&g.landmarks[o.landmark]);
        let r = br_residual(bearing_range(&q)?, bearing_range(&o.measurement)?)?;
        cost += huber((w.observation * r).norm_squared(), delta);
    }
    Ok(cost)
}

pub fn total_cost(g: &GraphState, edges: &[OdometryEdge], noise: &NoiseModel) -> Result<f64, GraphError> {
    check_references(g, edges)?;
    cost_with(g, edges, &Whitening::new(noise)?, noise.huber_delta)
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt with a landmark Schur complement

struct Normal {
    hpp: DMatrix<f64>,
    bp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    bl: Vec<Vector3<f64>>,
    /// Pose-landmark blocks grouped by landmark.
    hpl: Vec<BTreeMap<usize, Matrix6x3<f64>>>,
}

fn add_pose_block(h: &mut DMatrix<f64>, a: usize, b: usize, m: &Matrix6<f64>) {
    let mut v = h.view_mut((6 * a, 6 * b), (6, 6));
    v += m;
}

fn linearize(g: &GraphState, edges: &[OdometryEdge], w: &Whitening, delta: f64) -> Result<Normal, GraphError> {
    let np = g.poses.len();
    let nl = g.landmarks.len();
    let mut n = Normal {
        hpp: DMatrix::zeros(6 * np, 6 * np),
        bp: DVector::zeros(6 * np),
        hll: vec![Matrix3::zeros(); nl],
        bl: vec![Vector3::zeros(); nl],
        hpl: vec![BTreeMap::new(); nl],
    };

    let (r, j) = prior_residual(&g.poses[0])?;
    let (e, jw) = (w.prior * r, w.prior * j);
    add_pose_block(&mut n.hpp, 0, 0, &(jw.transpose() * jw));
    let mut v = n.bp.rows_mut(0, 6);
    v += jw.transpose() * e;

    for edge in edges {
        let sqrt_info = sqrt_info6(&edge.covariance, "odometry edge")?;
        let (r, ja, jb) = odometry_residual(&g.poses[edge.from], &g.poses[edge.to], &edge.measurement)?;
        let e = sqrt_info * r;
        let wt = huber_weight(e.norm_squared(), delta);
        let (ja, jb) = (sqrt_info * ja, sqrt_info * jb);
        add_pose_block(&mut n.hpp, edge.from, edge.from, &(ja.transpose() * ja * wt));
        add_pose_block(&mut n.hpp, edge.to, edge.to, &(jb.transpose() * jb * wt));
        add_pose_block(&mut n.hpp, edge.from, edge.to, &(ja.transpose() * jb * wt));
        add_pose_block(&mut n.hpp, edge.to, edge.from, &(jb.transpose() * ja * wt));
        let mut v = n.bp.rows_mut(6 * edge.from, 6);
        v += ja.transpose() * e * wt;
        let mut v = n.bp.rows_mut(6 * edge.to, 6);
        v += jb.transpose() * e * wt;
    }

    for o in &g.observations {
        let (r, jx, jp) = landmark_residual(&g.poses[o.keyframe], &g.landmarks[o.landmark], &o.measurement)?;
        let e = w.observation * r;
        let wt = huber_weight(e.norm_squared(), delta);
        let (jx, jp) = (w.observation * jx, w.observation * jp);
        add_pose_block(&mut n.hpp, o.keyframe, o.keyframe, &(jx.transpose() * jx * wt));
        let mut v = n.bp.rows_mut(6 * o.keyframe, 6);
        v += jx.transpose() * e * wt;
        n.hll[o.landmark] += jp.transpose() * jp * wt;
        n.bl[o.landmark] += jp.transpose() * e * wt;
        *n.hpl[o.landmark].entry(o.keyframe).or_insert_with(Matrix6x3::zeros) += jx.transpose() * jp * wt;
    }
    Ok(n)
}

/// Solves the damped system; `None` if it is not positive definite.
fn solve_damped(n: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    const FLOOR: f64 = 1e-12;
    let mut s = n.hpp.clone();
    for k in 0..s.nrows() {
        s[(k, k)] += lambda * n.hpp[(k, k)].max(FLOOR);
    }
    let mut rhs = -n.bp.clone();
    let mut hll_inv = Vec::with_capacity(n.hll.len());
    for (l, h) in n.hll.iter().enumerate() {
        let mut d = *h;
        for k in 0..3 {
            d[(k, k)] += lambda * h[(k, k)].max(FLOOR);
        }
        let inv = d.cholesky()?.inverse();
        for (&a, wa) in &n.hpl[l] {
            let wa_inv = wa * inv;
            let mut v = rhs.rows_mut(6 * a, 6);
            v += wa_inv * n.bl[l];
            for (&b, wb) in &n.hpl[l] {
                let mut blk = s.view_mut((6 * a, 6 * b), (6, 6));
                blk -= wa_inv * wb.transpose();
            }
        }
        hll_inv.push(inv);
    }
    let dp = s.cholesky()?.solve(&rhs);
    let dl = (0..n.hll.len())
        .map(|l| {
            let mut r = -n.bl[l];
            for (&a, wa) in &n.hpl[l] {
                r -= wa.transpose() * dp.rows(6 * a, 6);
            }
            hll_inv[l] * r
        })
        .collect();
    Some((dp, dl))
}

fn retract(g: &GraphState, dp: &DVector<f64>, dl: &[Vector3<f64>]) -> GraphState {
    let mut out = g.clone();
    for (m, x) in out.poses.iter_mut().enumerate() {
        let xi = Vector6::from_iterator(dp.rows(6 * m, 6).iter().copied());
        *x = se3_exp(&Twist::from_vector(&xi)).compose(x);
    }
    for (p, d) in out.landmarks.iter_mut().zip(dl) {
        *p += d;
    }
    out
}

/// Costs at or below this are treated as already optimal.
const ZERO_COST: f64 = 1e-20;

/// Levenberg-Marquardt. On error the input state is left untouched.
pub fn optimize(
    g: &mut GraphState,
    edges: &[OdometryEdge],
    noise: &NoiseModel,
    cfg: &LmConfig,
) -> Result<OptimizeReport, GraphError> {
    check_references(g, edges)?;
    let mut observed = vec![false; g.landmarks.len()];
    for o in &g.observations {
        observed[o.landmark] = true;
    }
    if let Some(l) = observed.iter().position(|o| !o) {
        return Err(GraphError::UnobservedLandmark(l));
    }
    let w = Whitening::new(noise)?;
    let delta = noise.huber_delta;

    let mut state = g.clone();
    let mut cost = cost_with(&state, edges, &w, delta)?;
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = cfg.initial_lambda;

    for _ in 0..cfg.max_iterations {
        if cost <= ZERO_COST {
            break;
        }
        let normal = linearize(&state, edges, &w, delta)?;
        let mut accepted = None;
        let mut solved = false;
        while lambda <= cfg.max_lambda {
            match solve_damped(&normal, lambda) {
                None => lambda *= cfg.lambda_factor,
                Some((dp, dl)) => {
                    solved = true;
                    let candidate = retract(&state, &dp, &dl);
                    match cost_with(&candidate, edges, &w, delta) {
                        Ok(c) if c < cost => {
                            accepted = Some((candidate, c));
                            lambda = (lambda / cfg.lambda_factor).max(1e-15);
                            break;
                        }
                        _ => lambda *= cfg.lambda_factor,
                    }
                }
            }
        }
        let Some((candidate, c)) = accepted else {
            if !solved {
                return Err(GraphError::Diverged);
            }
            break;
        };
        let improvement = cost - c;
        state = candidate;
        cost = c;
        trace.push(c);
        if improvement <= cfg.relative_tolerance * trace[trace.len() - 2] {
            break;
        }
    }

    *g = state;
    Ok(OptimizeReport {
        initial_cost,
        final_cost: cost,
        accepted_steps: trace.len() - 1,
        cost_trace: trace,
    })
}

/// Owns a graph together with its odometry edges and noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub state: GraphState,
    pub edges: Vec<OdometryEdge>,
    pub noise: NoiseModel,
    pub lm: LmConfig,
}

impl FactorGraph {
    pub fn new(noise: NoiseModel, lm: LmConfig) -> Self {
        Self {
            state: GraphState::default(),
            edges: Vec::new(),
            noise,
            lm,
        }
    }

    pub fn keyframe_count(&self) -> usize {
        self.state.poses.len()
    }

    /// Appends a keyframe, any new landmarks and observations, then
    /// re-optimizes the whole graph. `odometry` is the measured motion from
    /// the previous keyframe and is ignored for the first one.
    pub fn insert_keyframe(
        &mut self,
        pose: Pose,
        odometry: Option<Pose>,
        new_landmarks: &[Vector3<f64>],
        observations: &[Observation],
    ) -> Result<OptimizeReport, GraphError> {
        let mut next = self.clone();
        let m = next.state.poses.len();
        next.state.poses.push(pose);
        if m > 0 {
            let z = odometry.ok_or_else(|| GraphError::InvalidReference(format!("keyframe {m} has no odometry")))?;
            next.edges.push(OdometryEdge {
                from: m - 1,
                to: m,
                measurement: z,
                covariance: next.noise.odometry,
            });
        }
        next.state.landmarks.extend_from_slice(new_landmarks);
        next.state.observations.extend_from_slice(observations);
        let report = optimize(&mut next.state, &next.edges, &next.noise, &next.lm)?;
        *self = next;
        Ok(report)
    }

    /// One factor per line: kind, variables, whitened residual norm.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        let Ok(w) = Whitening::new(&self.noise) else {
            return out;
        };
        let g = &self.state;
        if let Some(x0) = g.poses.first() {
            if let Ok((r, _)) = prior_residual(x0) {
                let _ = writeln!(out, "prior X0 {:.6e}", (w.prior * r).norm());
            }
        }
        for e in &self.edges {
            let norm = sqrt_info6(&e.covariance, "odometry edge")
                .and_then(|s| Ok(s * odometry_residual(&g.poses[e.from], &g.poses[e.to], &e.measurement)?.0))
                .map(|r| r.norm());
            match norm {
                Ok(n) => writeln!(out, "odometry X{} X{} {:.6e}", e.from, e.to, n),
                Err(_) => writeln!(out, "odometry X{} X{} nan", e.from, e.to),
            }
            .ok();
        }
        for o in &g.observations {
            match landmark_residual(&g.poses[o.keyframe], &g.landmarks[o.landmark], &o.measurement) {
                Ok((r, _, _)) => writeln!(out, "bearing_range X{} L{} {:.6e}", o.keyframe, o.landmark, (w.observation * r).norm()),
                Err(_) => writeln!(out, "bearing_range X{} L{} nan", o.keyframe, o.landmark),
            }
            .ok();
        }
        out
    }
}
