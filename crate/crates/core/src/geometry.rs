//! Camera models and rigid-motion algebra.
//!
//! Two projection models are provided, both mapping 3D points in the camera
//! frame (z forward, x right, y down; the same axes convention is used
//! globally) to continuous pixel coordinates:
//!
//! * fisheye: radial polynomial `rho(theta) = k1*theta + k2*theta^2 +
//!   k3*theta^3 + k4*theta^4` where `theta` is the angle off the optical
//!   axis, valid for `theta <= theta_max`;
//! * rectilinear (pinhole): `u = cx + fx*x/z`, `v = cy + fy*y/z`.
//!
//! Unprojection inverts the radial polynomial with a safeguarded Newton
//! iteration. Rigid transforms are `Pose` values (orthonormal rotation +
//! translation, sensor frame to world frame).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3D point or direction in meters. Axes: z forward, x right, y down.
pub type Point3 = Vector3<f64>;

/// Continuous pixel coordinates: u along width, v along height (downward).
///
/// Serialized as a `[u, v]` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }
}

impl Serialize for Pixel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.u, self.v].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pixel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [u, v] = <[f64; 2]>::deserialize(d)?;
        Ok(Pixel { u, v })
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("angle off axis {theta} exceeds theta_max {theta_max}")]
    AngleOutOfFov { theta: f64, theta_max: f64 },
    #[error("point too close to the camera center to project")]
    DegeneratePoint,
    #[error("pixel radius {r} outside the image circle (max {r_max})")]
    OutsideImageCircle { r: f64, r_max: f64 },
    #[error("Newton iteration for the radial polynomial did not converge")]
    NoConvergence,
    #[error("point behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Number of samples used to verify that rho is strictly increasing.
const MONOTONICITY_GRID: usize = 1024;
/// Newton iteration budget and residual tolerance for unprojection.
const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_TOL: f64 = 1e-12;

/// Fisheye intrinsics with a quartic radial polynomial.
///
/// Invariants, checked at construction (and therefore on deserialization):
/// image dimensions positive, principal point inside the image,
/// `0 < theta_max <= pi`, and `rho` strictly increasing on `[0, theta_max]`
/// (derivative positive on a 1024-point grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FisheyeIntrinsicsRaw", into = "FisheyeIntrinsicsRaw")]
pub struct FisheyeIntrinsics {
    pub width: u32,
    pub height: u32,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub theta_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FisheyeIntrinsicsRaw {
    width: u32,
    height: u32,
    cx: f64,
    cy: f64,
    k1: f64,
    k2: f64,
    k3: f64,
    k4: f64,
    theta_max: f64,
}

impl TryFrom<FisheyeIntrinsicsRaw> for FisheyeIntrinsics {
    type Error = GeometryError;
    fn try_from(r: FisheyeIntrinsicsRaw) -> Result<Self, Self::Error> {
        FisheyeIntrinsics::new(
            r.width, r.height, r.cx, r.cy, r.k1, r.k2, r.k3, r.k4, r.theta_max,
        )
    }
}

impl From<FisheyeIntrinsics> for FisheyeIntrinsicsRaw {
    fn from(i: FisheyeIntrinsics) -> Self {
        FisheyeIntrinsicsRaw {
            width: i.width,
            height: i.height,
            cx: i.cx,
            cy: i.cy,
            k1: i.k1,
            k2: i.k2,
            k3: i.k3,
            k4: i.k4,
            theta_max: i.theta_max,
        }
    }
}

impl FisheyeIntrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: u32,
        height: u32,
        cx: f64,
        cy: f64,
        k1: f64,
        k2: f64,
        k3: f64,
        k4: f64,
        theta_max: f64,
    ) -> Result<Self, GeometryError> {
        let err = |m: String| Err(GeometryError::InvalidIntrinsics(m));
        if width == 0 || height == 0 {
            return err(format!("image dimensions must be positive, got {width}x{height}"));
        }
        for (name, v) in [("cx", cx), ("cy", cy), ("k1", k1), ("k2", k2), ("k3", k3), ("k4", k4), ("theta_max", theta_max)] {
            if !v.is_finite() {
                return err(format!("{name} must be finite, got {v}"));
            }
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return err(format!("principal point ({cx}, {cy}) outside the image"));
        }
        if !(theta_max > 0.0 && theta_max <= std::f64::consts::PI) {
            return err(format!("theta_max must lie in (0, pi], got {theta_max}"));
        }
        let intr = FisheyeIntrinsics { width, height, cx, cy, k1, k2, k3, k4, theta_max };
        for i in 0..MONOTONICITY_GRID {
            let theta = theta_max * i as f64 / (MONOTONICITY_GRID - 1) as f64;
            if intr.rho_deriv(theta) <= 0.0 {
                return err(format!(
                    "rho is not strictly increasing: rho'({theta}) = {}",
                    intr.rho_deriv(theta)
                ));
            }
        }
        Ok(intr)
    }

    /// Radial distance from the principal point for angle `theta` off axis.
    pub fn rho(&self, theta: f64) -> f64 {
        // Horner form of k1*t + k2*t^2 + k3*t^3 + k4*t^4.
        theta * (self.k1 + theta * (self.k2 + theta * (self.k3 + theta * self.k4)))
    }

    /// d rho / d theta.
    pub fn rho_deriv(&self, theta: f64) -> f64 {
        self.k1 + theta * (2.0 * self.k2 + theta * (3.0 * self.k3 + theta * 4.0 * self.k4))
    }

    /// Radius of the image circle, `rho(theta_max)`.
    pub fn rho_max(&self) -> f64 {
        self.rho(self.theta_max)
    }
}

/// Pinhole intrinsics. Invariants: positive focal lengths, principal point
/// inside the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RectilinearIntrinsicsRaw", into = "RectilinearIntrinsicsRaw")]
pub struct RectilinearIntrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RectilinearIntrinsicsRaw {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl TryFrom<RectilinearIntrinsicsRaw> for RectilinearIntrinsics {
    type Error = GeometryError;
    fn try_from(r: RectilinearIntrinsicsRaw) -> Result<Self, Self::Error> {
        RectilinearIntrinsics::new(r.width, r.height, r.fx, r.fy, r.cx, r.cy)
    }
}

impl From<RectilinearIntrinsics> for RectilinearIntrinsicsRaw {
    fn from(i: RectilinearIntrinsics) -> Self {
        RectilinearIntrinsicsRaw {
            width: i.width,
            height: i.height,
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
        }
    }
}

impl RectilinearIntrinsics {
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let err = |m: String| Err(GeometryError::InvalidIntrinsics(m));
        if width == 0 || height == 0 {
            return err(format!("image dimensions must be positive, got {width}x{height}"));
        }
        for (name, v) in [("fx", fx), ("fy", fy), ("cx", cx), ("cy", cy)] {
            if !v.is_finite() {
                return err(format!("{name} must be finite, got {v}"));
            }
        }
        if fx <= 0.0 || fy <= 0.0 {
            return err(format!("focal lengths must be positive, got fx={fx} fy={fy}"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return err(format!("principal point ({cx}, {cy}) outside the image"));
        }
        Ok(RectilinearIntrinsics { width, height, fx, fy, cx, cy })
    }
}

/// Minimum squared norm below which a point cannot be projected.
const DEGENERATE_NORM: f64 = 1e-12;
/// Minimum depth for the rectilinear model.
const MIN_DEPTH: f64 = 1e-6;

/// Projects a camera-frame point through the fisheye model.
pub fn project_fisheye(intr: &FisheyeIntrinsics, p: &Point3) -> Result<Pixel, GeometryError> {
    if p.norm() < DEGENERATE_NORM {
        return Err(GeometryError::DegeneratePoint);
    }
    let r_xy = (p.x * p.x + p.y * p.y).sqrt();
    let theta = r_xy.atan2(p.z);
    if theta > intr.theta_max {
        return Err(GeometryError::AngleOutOfFov { theta, theta_max: intr.theta_max });
    }
    if r_xy == 0.0 {
        return Ok(Pixel::new(intr.cx, intr.cy));
    }
    let rho = intr.rho(theta);
    Ok(Pixel::new(intr.cx + rho * p.x / r_xy, intr.cy + rho * p.y / r_xy))
}

/// Inverts the fisheye model: pixel to unit ray in the camera frame.
///
/// The radial polynomial is inverted with Newton iteration started at
/// `theta = r / k1`, clamped to `[0, theta_max]`, at most 50 iterations,
/// residual tolerance 1e-12 on `|rho(theta) - r|`.
pub fn unproject_fisheye(intr: &FisheyeIntrinsics, px: &Pixel) -> Result<Point3, GeometryError> {
    let du = px.u - intr.cx;
    let dv = px.v - intr.cy;
    let r = (du * du + dv * dv).sqrt();
    let r_max = intr.rho_max();
    if r > r_max + 1e-9 {
        return Err(GeometryError::OutsideImageCircle { r, r_max });
    }
    if r == 0.0 {
        return Ok(Point3::new(0.0, 0.0, 1.0));
    }
    let mut theta = (r / intr.k1).clamp(0.0, intr.theta_max);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITERS {
        let f = intr.rho(theta) - r;
        if f.abs() <= NEWTON_TOL {
            converged = true;
            break;
        }
        theta = (theta - f / intr.rho_deriv(theta)).clamp(0.0, intr.theta_max);
    }
    if !converged && (intr.rho(theta) - r).abs() > NEWTON_TOL {
        return Err(GeometryError::NoConvergence);
    }
    let phi = dv.atan2(du);
    let (sin_t, cos_t) = theta.sin_cos();
    Ok(Point3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t))
}

/// Projects a camera-frame point through the pinhole model.
pub fn project_rectilinear(intr: &RectilinearIntrinsics, p: &Point3) -> Result<Pixel, GeometryError> {
    if p.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok(Pixel::new(intr.cx + intr.fx * p.x / p.z, intr.cy + intr.fy * p.y / p.z))
}

/// Inverts the pinhole model: pixel to unit ray in the camera frame.
pub fn unproject_rectilinear(intr: &RectilinearIntrinsics, px: &Pixel) -> Result<Point3, GeometryError> {
    let d = Point3::new((px.u - intr.cx) / intr.fx, (px.v - intr.cy) / intr.fy, 1.0);
    Ok(d / d.norm())
}

/// Tagged union over the two camera models, used wherever a pipeline stage
/// is generic over the projection (scene synthesis, annotation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Camera {
    Fisheye(FisheyeIntrinsics),
    Rectilinear(RectilinearIntrinsics),
}

impl Camera {
    pub fn width(&self) -> u32 {
        match self {
            Camera::Fisheye(i) => i.width,
            Camera::Rectilinear(i) => i.width,
        }
    }

    pub fn height(&self) -> u32 {
        match self {
            Camera::Fisheye(i) => i.height,
            Camera::Rectilinear(i) => i.height,
        }
    }

    pub fn model_name(&self) -> &'static str {
        match self {
            Camera::Fisheye(_) => "fisheye",
            Camera::Rectilinear(_) => "rectilinear",
        }
    }

    pub fn project(&self, p: &Point3) -> Result<Pixel, GeometryError> {
        match self {
            Camera::Fisheye(i) => project_fisheye(i, p),
            Camera::Rectilinear(i) => project_rectilinear(i, p),
        }
    }

    pub fn unproject(&self, px: &Pixel) -> Result<Point3, GeometryError> {
        match self {
            Camera::Fisheye(i) => unproject_fisheye(i, px),
            Camera::Rectilinear(i) => unproject_rectilinear(i, px),
        }
    }
}

/// Tolerance for the orthonormality and determinant checks on rotations.
const POSE_TOL: f64 = 1e-9;

/// Rigid transform from a local frame to a parent frame: `p' = R p + t`.
///
/// The rotation is checked to be orthonormal with determinant +1 (within
/// 1e-9) at construction and deserialization. Serialized with the rotation
/// as row-major nested arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().any(|v| !v.is_finite()) || translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > POSE_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (max |R'R - I| = {dev:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > POSE_TOL {
            return Err(GeometryError::InvalidPose(format!("rotation determinant {det} != +1")));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rotation about the world vertical (+y) by `yaw`, no translation.
    pub fn from_yaw(yaw: f64) -> Self {
        Pose { rotation: yaw_matrix(yaw), translation: Vector3::zeros() }
    }

    pub fn from_yaw_translation(yaw: f64, translation: Vector3<f64>) -> Self {
        Pose { rotation: yaw_matrix(yaw), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self` then applied after `other`: `(self * other) p = self(other(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn rotate(&self, d: &Point3) -> Point3 {
        self.rotation * d
    }
}

/// Rotation about +y by `yaw` (right-handed, y down):
/// maps (0,0,1) to (sin yaw, 0, cos yaw).
pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[derive(Serialize, Deserialize)]
struct PoseRaw {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRaw {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = PoseRaw::deserialize(d)?;
        let m = raw.rotation;
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        Pose::new(rotation, Vector3::new(raw.translation[0], raw.translation[1], raw.translation[2]))
            .map_err(serde::de::Error::custom)
    }
}

/// Serde adapter serializing a `Vector3<f64>` as `[x, y, z]`.
pub mod vec3_serde {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(x, y, z))
    }
}
