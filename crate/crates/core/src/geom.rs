//! Rigid-motion and plane algebra.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] maps frame-1 points into frame 2: `x2 = R x1 + t`.
//! * A [`Plane`] is the set `{x : n·x = d}` with a unit normal `n`. Stored
//!   planes are canonical (`d >= 0`); warped planes may carry a negative
//!   offset internally when the camera crosses the plane.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeomError;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Offsets below this magnitude are treated as planes through the camera center.
pub const MIN_PLANE_OFFSET: f64 = 1e-9;

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes `(w, x, y, z)`. Returns `None` for a (near) zero 4-vector.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm < 1e-300 {
            return None;
        }
        Some(Self { w: w / norm, x: x / norm, y: y / norm, z: z / norm })
    }

    /// Normalizes `(w, x, y, z)`.
    ///
    /// # Panics
    /// Panics when the input has zero norm; use [`UnitQuaternion::try_new`]
    /// for untrusted input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::try_new(w, x, y, z).expect("quaternion with zero norm")
    }

    pub fn from_array(q: [f64; 4]) -> Option<Self> {
        Self::try_new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `|v|` radians about `v / |v|`.
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order expansion keeps tiny rotations accurate
            let half = 0.5 * v;
            return Self::new(1.0 - angle * angle / 8.0, half.x, half.y, half.z);
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let axis = v / angle;
        Self::new(c, s * axis.x, s * axis.y, s * axis.z)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::from_rotation_vector(&(axis.normalize() * angle))
    }

    /// Rotation vector with angle in `[0, pi]`.
    pub fn to_rotation_vector(self) -> Vec3 {
        let q = self.canonicalize();
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-12 {
            return 2.0 * v;
        }
        let angle = 2.0 * s.atan2(q.w);
        v * (angle / s)
    }

    /// Representative with `w >= 0`; the rotation is unchanged.
    pub fn canonicalize(self) -> Self {
        if self.w < 0.0 {
            self.negate()
        } else {
            self
        }
    }

    pub fn negate(self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn conjugate(self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Hamilton product `self * other` (apply `other` first).
    pub fn mul(self, o: Self) -> Self {
        let (a, b) = (self, o);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        Self::new(w, x, y, z)
    }

    pub fn rotate(self, v: &Vec3) -> Vec3 {
        quat_to_matrix(self) * v
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: UnitQuaternion) -> Mat3 {
    let UnitQuaternion { w, x, y, z } = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a scalar `L(R(q))` with respect to the four components of
/// `q`, given `g = dL/dR`. `R(q)` is differentiated as the quadratic form in
/// [`quat_to_matrix`] (no renormalization).
pub fn quat_to_matrix_vjp(q: UnitQuaternion, g: &Mat3) -> [f64; 4] {
    let UnitQuaternion { w, x, y, z } = q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Relative camera motion `x2 = R x1 + t`.
///
/// Serialized as `{"quat": [w, x, y, z], "t": [x, y, z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRecord", try_from = "PoseRecord")]
pub struct Pose {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::IDENTITY, Vec3::zeros())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(self.rotation)
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation_matrix() * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul(other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.conjugate();
        Pose { rotation: inv, translation: -inv.rotate(&self.translation) }
    }

    pub fn canonicalize(self) -> Pose {
        Pose { rotation: self.rotation.canonicalize(), ..self }
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    quat: [f64; 4],
    t: [f64; 3],
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        Self { quat: p.rotation.to_array(), t: p.translation.into() }
    }
}

impl TryFrom<PoseRecord> for Pose {
    type Error = String;

    fn try_from(r: PoseRecord) -> Result<Self, String> {
        let [w, x, y, z] = r.quat;
        let raw = UnitQuaternion { w, x, y, z };
        // stored values are kept bit-exact; only off-norm input is renormalized
        let rotation = if (raw.norm() - 1.0).abs() < 1e-9 {
            raw
        } else {
            UnitQuaternion::from_array(r.quat).ok_or("zero quaternion")?
        };
        Ok(Pose::new(rotation, Vec3::from(r.t)))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Plane `n·x = d` with unit normal and non-negative offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Normalizes the normal (rescaling the offset accordingly) and flips to
    /// the canonical `offset >= 0` form.
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let len = normal.norm();
        Self::from_signed(normal / len, offset / len)
    }

    /// Canonicalizes an already unit-length `(n, d)` pair.
    pub fn from_signed(normal: Vec3, offset: f64) -> Self {
        if offset < 0.0 {
            Self { normal: -normal, offset: -offset }
        } else {
            Self { normal, offset }
        }
    }

    /// `(nx, ny, nz, d)`.
    pub fn to_vec4(&self) -> [f64; 4] {
        [self.normal.x, self.normal.y, self.normal.z, self.offset]
    }

    /// Closest point of the plane to the origin, `d n`.
    pub fn foot(&self) -> Vec3 {
        self.normal * self.offset
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

/// A frame-1 plane paired with its frame-2 counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePair {
    pub first: Plane,
    pub second: Plane,
}

impl PlanePair {
    pub fn new(first: Plane, second: Plane) -> Self {
        Self { first, second }
    }
}

/// Frame-2 parameters of a frame-1 plane, without canonicalization.
pub fn warp_plane_signed(p: &Plane, pose: &Pose) -> (Vec3, f64) {
    let n = pose.rotation.rotate(&p.normal);
    (n, p.offset + n.dot(&pose.translation))
}

/// Expresses a frame-1 plane in frame 2.
pub fn warp_plane(p: &Plane, pose: &Pose) -> Plane {
    let (n, d) = warp_plane_signed(p, pose);
    Plane::from_signed(n, d)
}

/// Weights of the normal-angle and offset terms of the geometric affinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityWeights {
    pub normal: f64,
    pub offset: f64,
}

impl Default for AffinityWeights {
    fn default() -> Self {
        Self { normal: 0.125, offset: 0.25 }
    }
}

/// Angle between two unit vectors, in radians.
pub fn unit_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Geometric affinity between a warped frame-1 plane and a frame-2 plane:
/// `-λ1·angle(n1, n2) - λ2·|d1 - d2|`. Never positive.
pub fn geometric_affinity(p1_warped: &Plane, p2: &Plane, w: AffinityWeights) -> f64 {
    -w.normal * unit_angle(&p1_warped.normal, &p2.normal)
        - w.offset * (p1_warped.offset - p2.offset).abs()
}

/// Rotation and translation costs of one pose hypothesis over a set of plane
/// correspondences.
///
/// `rot[i] = |n̂ᵢ - nᵢ'|` and `trans[i] = |d̂ᵢ n̂ᵢ - dᵢ' nᵢ'|` where
/// `(n̂ᵢ, d̂ᵢ)` is the signed warp of the first plane by `hyp`.
pub fn one_plane_costs(hyp: &Pose, corrs: &[PlanePair]) -> (Vec<f64>, Vec<f64>) {
    corrs
        .iter()
        .map(|c| {
            let (n, d) = warp_plane_signed(&c.first, hyp);
            let rot = (n - c.second.normal).norm();
            let trans = (n * d - c.second.foot()).norm();
            (rot, trans)
        })
        .unzip()
}

/// Geodesic angle between two rotations, in degrees within `[0, 180]`.
pub fn rotation_geodesic_deg(q1: UnitQuaternion, q2: UnitQuaternion) -> f64 {
    rotation_geodesic_rad(q1, q2).to_degrees()
}

pub fn rotation_geodesic_rad(q1: UnitQuaternion, q2: UnitQuaternion) -> f64 {
    // atan2 form keeps precision for nearly equal rotations; |w| folds the double cover
    let diff = q1.conjugate().mul(q2);
    let s = (diff.x * diff.x + diff.y * diff.y + diff.z * diff.z).sqrt();
    (2.0 * s.atan2(diff.w.abs())).clamp(0.0, std::f64::consts::PI)
}

/// Homography `H = R + t nᵀ / d` induced by a frame-1 plane on normalized
/// image coordinates.
pub fn plane_induced_homography(p: &Plane, pose: &Pose) -> Result<Mat3, GeomError> {
    if p.offset.abs() < MIN_PLANE_OFFSET {
        return Err(GeomError::ZeroOffset(p.offset));
    }
    Ok(pose.rotation_matrix() + pose.translation * p.normal.transpose() / p.offset)
}

/// Rotation matrix to unit quaternion (Shepperd's method).
pub fn matrix_to_quat(m: &Mat3) -> UnitQuaternion {
    let trace = m.trace();
    let (w, x, y, z);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    UnitQuaternion::new(w, x, y, z).canonicalize()
}

/// Convex polygon in normalized image coordinates, counter-clockwise.
pub type Polygon = Vec<[f64; 2]>;

/// Projects a point in camera coordinates to normalized image coordinates.
pub fn project(x: &Vec3) -> Option<nalgebra::Vector2<f64>> {
    (x.z > 1e-12).then(|| nalgebra::Vector2::new(x.x / x.z, x.y / x.z))
}
