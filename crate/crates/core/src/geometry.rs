//! Rigid-body math on SE(3)/SO(3), pinhole projection and point containers.
//!
//! Conventions used everywhere in the crate:
//! - lengths in meters, angles in radians, pixel origin at the top-left with
//!   pixel `(row i, col j)` centered at `(u = j, v = i)`;
//! - twists are ordered `(ω, v)`: rotational part first;
//! - a [`Pose`] maps points `p ↦ R p + t`, and `compose(a, b)` applies `b` first.

use std::fmt;

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Rotation angles closer than this to π are rejected by the logarithm.
pub const LOG_SINGULARITY_MARGIN: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} is too close to π for the logarithm map")]
    LogSingularity(f64),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("invalid pose matrix: {0}")]
    InvalidPose(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Skew-symmetric matrix such that `hat(a) * b == a × b`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation angle in `[0, π]`, computed robustly from both the trace and the
/// antisymmetric part.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = 0.5 * vee(&(r - r.transpose())).norm();
    sin.atan2(cos)
}

/// Axis-angle vector of a rotation matrix.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let theta = rotation_angle(r);
    if theta > std::f64::consts::PI - LOG_SINGULARITY_MARGIN {
        return Err(GeometryError::LogSingularity(theta));
    }
    let anti = vee(&(r - r.transpose())) * 0.5;
    if theta < SMALL_ANGLE {
        // sin θ / θ ≈ 1 − θ²/6
        return Ok(anti / (1.0 - theta * theta / 6.0));
    }
    if theta < 3.0 {
        return Ok(anti * (theta / theta.sin()));
    }
    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part (1 − cos θ) a aᵀ and take the sign from `anti`.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * theta.cos();
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(best).into();
    axis.normalize_mut();
    if axis.dot(&anti) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Element of se(3), `(ω, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        out.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.rotation * s, self.translation * s)
    }
}

/// The `Q` block of the SE(3) left Jacobian, in `(ω, v)` ordering.
fn se3_q_block(w: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let wx = hat(w);
    let vx = hat(v);
    let (c1, c2, c3) = if theta < 1e-3 {
        (
            1.0 / 6.0 - theta2 / 120.0,
            1.0 / 24.0 - theta2 / 720.0,
            1.0 / 120.0 - theta2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        (
            (theta - s) / t3,
            (theta2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let wv = wx * vx;
    let vw = vx * wx;
    let wvw = wx * vx * wx;
    vx * 0.5 + (wv + vw + wvw) * c1 + (wx * wv + vw * wx - wvw * 3.0) * c2
        + (wvw * wx + wx * wvw) * c3
}

/// Left Jacobian of SE(3) in `(ω, v)` ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.rotation);
    let q = se3_q_block(&xi.rotation, &xi.translation);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let ji = so3_left_jacobian_inv(&xi.rotation);
    let q = se3_q_block(&xi.rotation, &xi.translation);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ji * q * ji));
    out
}

/// Right Jacobian inverse: `J_r⁻¹(ξ) = J_l⁻¹(−ξ)`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&xi.scaled(-1.0))
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self::new(so3_exp(&axis_angle), t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Geodesic angle between the two rotations.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        se3_log(self)
    }

    pub fn exp(xi: &Twist) -> Pose {
        se3_exp(xi)
    }

    /// Adjoint in `(ω, v)` ordering: `T exp(ξ) T⁻¹ = exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut out = Matrix6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        out.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * self.rotation));
        out
    }

    /// Projects the rotation back onto SO(3) via SVD.
    pub fn renormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Pose::new(u * d * vt, self.translation)
    }

    /// Largest absolute deviation from an orthonormal, det +1 rotation.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.abs().max().max((self.rotation.determinant() - 1.0).abs())
    }

    /// Max-abs entry difference of the 3×4 parts.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }

    /// Row-major 4×4 matrix entries.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out[15] = 1.0;
        out
    }

    pub fn from_row_major(m: &[f64]) -> Result<Pose, GeometryError> {
        if m.len() != 16 {
            return Err(GeometryError::InvalidPose(format!(
                "expected 16 entries, got {}",
                m.len()
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entry".into()));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(GeometryError::InvalidPose(
                "last row must be 0 0 0 1".into(),
            ));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let pose = Pose::new(rotation, Vector3::new(m[3], m[7], m[11]));
        if pose.orthonormality_error() > 1e-6 {
            return Err(GeometryError::InvalidPose(
                "rotation block is not orthonormal".into(),
            ));
        }
        Ok(pose)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.to_row_major();
        for (i, x) in m.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn se3_exp(xi: &Twist) -> Pose {
    Pose::new(
        so3_exp(&xi.rotation),
        so3_left_jacobian(&xi.rotation) * xi.translation,
    )
}

pub fn se3_log(p: &Pose) -> Result<Twist, GeometryError> {
    let w = so3_log(&p.rotation)?;
    Ok(Twist::new(w, so3_left_jacobian_inv(&w) * p.translation))
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite principal point".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        project(self, p)
    }

    pub fn back_project(&self, uv: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        back_project(self, uv, depth)
    }

    /// Nearest pixel `(col, row)` for continuous image coordinates, if inside.
    pub fn nearest_pixel(&self, uv: &Vector2<f64>) -> Option<(usize, usize)> {
        let col = uv.x.round();
        let row = uv.y.round();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((col as usize, row as usize))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub fn project(cam: &CameraModel, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Vector2::new(
        cam.fx * p.x / p.z + cam.cx,
        cam.fy * p.y / p.z + cam.cy,
    ))
}

pub fn back_project(
    cam: &CameraModel,
    uv: &Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        (uv.x - cam.cx) * depth / cam.fx,
        (uv.y - cam.cy) * depth / cam.fy,
        depth,
    ))
}

/// Points with optional per-point RGB colors in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            colors: self.colors.clone(),
        }
    }

    /// Axis-aligned bounds `(min, max)`, `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.points.first()?;
        let mut lo = *first;
        let mut hi = *first;
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(0.0..max_angle);
        let t = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        Pose::from_axis_angle(axis * angle, t)
    }

    fn cam() -> CameraModel {
        CameraModel::new(500.0, 500.0, 240.0, 240.0, 480, 480).unwrap()
    }

    #[test]
    fn compose_identity_and_inverse() {
        let i = Pose::identity();
        assert_eq!(compose(&i, &i), i);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 3.0);
        assert!(compose(&p, &p.inverse()).max_abs_diff(&i) < 1e-9);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pose(&mut rng, 3.0);
        let b = random_pose(&mut rng, 3.0);
        let ab = compose(&a, &b);
        for _ in 0..10 {
            let p = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let seq = a.transform_point(&b.transform_point(&p));
            assert!((ab.transform_point(&p) - seq).norm() < 1e-12);
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_pose(&mut rng, 3.0);
            let b = random_pose(&mut rng, 3.0);
            let c = random_pose(&mut rng, 3.0);
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            assert!(l.max_abs_diff(&r) < 1e-9);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut acc = Pose::identity();
        for _ in 0..1000 {
            acc = compose(&acc, &random_pose(&mut rng, 3.0));
        }
        assert!(acc.orthonormality_error() < 1e-9);
        assert!((acc.renormalized().rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_of_identity_is_zero() {
        let xi = se3_log(&Pose::identity()).unwrap();
        assert_eq!(xi.norm(), 0.0);
    }

    #[test]
    fn log_of_quarter_turn_about_z() {
        let p = Pose::new(
            Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            Vector3::zeros(),
        );
        let xi = se3_log(&p).unwrap();
        assert!((xi.rotation - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-12);
        assert!(xi.translation.norm() < 1e-12);
    }

    #[test]
    fn exp_of_quarter_turn() {
        let p = se3_exp(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        let x = p.transform_point(&Vector3::x());
        assert!((x - Vector3::y()).norm() < 1e-12);
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = Pose::from_axis_angle(Vector3::new(0.0, PI, 0.0), Vector3::zeros());
        assert!(matches!(se3_log(&p), Err(GeometryError::LogSingularity(_))));
    }

    #[test]
    fn log_exp_round_trip_near_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..200 {
            let angle = PI - 1e-5 - (k as f64) * 1e-3;
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen(), rng.gen()).normalize();
            let p = Pose::from_axis_angle(axis * angle, Vector3::new(0.3, -0.2, 0.1));
            let q = se3_exp(&se3_log(&p).unwrap());
            assert!(p.max_abs_diff(&q) < 1e-9, "angle {angle}");
        }
    }

    #[test]
    fn half_twists_compose_to_full_for_pure_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let w = Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let full = se3_exp(&Twist::new(w, Vector3::zeros()));
            let half = se3_exp(&Twist::new(w * 0.5, Vector3::zeros()));
            assert!(compose(&half, &half).max_abs_diff(&full) < 1e-12);
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        // exp(ξ + δ) ≈ exp(J_l(ξ) δ) exp(ξ)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let xi = Twist::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
            let jl = se3_left_jacobian(&xi);
            let base = se3_exp(&xi);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let pert = se3_exp(&Twist::from_vector(&(xi.to_vector() + d)));
                let delta = se3_log(&compose(&pert, &base.inverse())).unwrap().to_vector() / h;
                let col = jl.column(k);
                assert!((delta - col).norm() < 1e-5, "column {k}");
            }
            let prod = jl * se3_left_jacobian_inv(&xi);
            assert!((prod - Matrix6::identity()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn adjoint_conjugates_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_pose(&mut rng, 2.0);
        let xi = Twist::new(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, 0.1, -0.1));
        let lhs = compose(&compose(&t, &se3_exp(&xi)), &t.inverse());
        let rhs = se3_exp(&Twist::from_vector(&(t.adjoint() * xi.to_vector())));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let c = cam();
        assert_eq!(c.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap(), Vector2::new(240.0, 240.0));
        assert_eq!(c.project(&Vector3::new(0.1, 0.0, 1.0)).unwrap(), Vector2::new(290.0, 240.0));
        assert_eq!(
            c.back_project(&Vector2::new(240.0, 240.0), 1.0).unwrap(),
            Vector3::new(0.0, 0.0, 1.0)
        );
        assert!((c.back_project(&Vector2::new(290.0, 240.0), 1.0).unwrap() - Vector3::new(0.1, 0.0, 1.0)).norm() < 1e-15);
        assert!(matches!(c.project(&Vector3::new(0.0, 0.0, 0.0)), Err(GeometryError::NonPositiveDepth(_))));
        assert!(matches!(c.back_project(&Vector2::new(1.0, 1.0), -1.0), Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn projection_round_trip_on_random_pixels() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let uv = Vector2::new(rng.gen_range(0.0..480.0), rng.gen_range(0.0..480.0));
            let d = rng.gen_range(0.1..5.0);
            let p = c.back_project(&uv, d).unwrap();
            assert!((c.project(&p).unwrap() - uv).norm() < 1e-9);
        }
    }

    #[test]
    fn row_major_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_pose(&mut rng, 3.0);
        let text = p.to_string();
        let vals: Vec<f64> = text.split(' ').map(|s| s.parse().unwrap()).collect();
        assert_eq!(Pose::from_row_major(&vals).unwrap(), p);
        assert!(Pose::from_row_major(&vals[..15]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pose_strategy() -> impl Strategy<Value = Pose> {
            (
                prop::array::uniform3(-1.0f64..1.0),
                0.0f64..(PI - 1e-3),
                prop::array::uniform3(-2.0f64..2.0),
            )
                .prop_filter_map("zero axis", |(a, ang, t)| {
                    let axis = Vector3::from(a);
                    (axis.norm() > 1e-3)
                        .then(|| Pose::from_axis_angle(axis.normalize() * ang, Vector3::from(t)))
                })
        }

        proptest! {
            #[test]
            fn exp_log_round_trip(p in pose_strategy()) {
                let q = se3_exp(&se3_log(&p).unwrap());
                prop_assert!(p.max_abs_diff(&q) < 1e-9);
            }

            #[test]
            fn project_back_project_inverse(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.05f64..5.0) {
                let c = cam();
                let p = Vector3::new(x, y, z);
                let uv = c.project(&p).unwrap();
                let q = c.back_project(&uv, p.z).unwrap();
                prop_assert!((p - q).norm() < 1e-9);
            }
        }
    }
}
