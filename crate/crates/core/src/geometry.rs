//! SE(3) pose algebra, quaternion metrics and the pinhole camera model.
//!
//! Rotations are unit quaternions in `(w, x, y, z)` order. Every constructor
//! and every composition renormalizes, so the unit-norm invariant holds to
//! within a few ulps at all times.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use thiserror::Error;

use crate::scalar::{wrap_angle, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth must be positive, got {z}")]
    NonPositiveDepth { z: f64 },
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("expected {expected} values, got {got}")]
    WrongLength { expected: usize, got: usize },
}

/// A 3-vector in meters (or unitless when used as a direction).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zeros() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(s: &[T]) -> Self {
        Self::new(s[0], s[1], s[2])
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

/// Row-major 3x3 rotation matrix.
pub type Mat3<T> = [[T; 3]; 3];

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion<T> {
    w: T,
    x: T,
    y: T,
    z: T,
}

impl<T: Real> Default for UnitQuaternion<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> UnitQuaternion<T> {
    pub fn identity() -> Self {
        Self { w: T::one(), x: T::zero(), y: T::zero(), z: T::zero() }
    }

    /// Normalizes the given components.
    pub fn try_new(w: T, x: T, y: T, z: T) -> Result<Self, GeometryError> {
        let n2 = w * w + x * x + y * y + z * z;
        if !(n2 > T::zero()) || !n2.is_finite() {
            return Err(GeometryError::DegenerateQuaternion);
        }
        if (n2 - T::one()).abs() <= T::lit(4.0) * T::epsilon() {
            // already unit length to rounding; keep bits stable
            return Ok(Self { w, x, y, z });
        }
        let n = n2.sqrt();
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    /// Panicking variant of [`UnitQuaternion::try_new`].
    pub fn new_normalize(w: T, x: T, y: T, z: T) -> Self {
        Self::try_new(w, x, y, z).expect("non-degenerate quaternion")
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Self {
        let n = axis.norm();
        if n == T::zero() {
            return Self::identity();
        }
        let half = angle / T::lit(2.0);
        let s = half.sin() / n;
        Self::new_normalize(half.cos(), axis.x * s, axis.y * s, axis.z * s)
    }

    /// Pure rotation about the vertical (z) axis.
    pub fn from_yaw(yaw: T) -> Self {
        let half = yaw / T::lit(2.0);
        Self { w: half.cos(), x: T::zero(), y: T::zero(), z: half.sin() }
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotation_vector(v: Vec3<T>) -> Self {
        let angle = v.norm();
        if angle < T::lit(1e-8) {
            // second-order series keeps the map smooth near zero
            let half = v.scale(T::lit(0.5));
            return Self::new_normalize(T::one() - half.norm_squared() / T::lit(2.0), half.x, half.y, half.z);
        }
        Self::from_axis_angle(v, angle)
    }

    /// Logarithm map: rotation vector with angle in [0, pi].
    pub fn to_rotation_vector(&self) -> Vec3<T> {
        let (w, v) = if self.w < T::zero() {
            (-self.w, Vec3::new(-self.x, -self.y, -self.z))
        } else {
            (self.w, Vec3::new(self.x, self.y, self.z))
        };
        let s = v.norm();
        if s < T::lit(1e-12) {
            return v.scale(T::lit(2.0));
        }
        let angle = T::lit(2.0) * s.atan2(w);
        v.scale(angle / s)
    }

    pub fn w(&self) -> T {
        self.w
    }
    pub fn x(&self) -> T {
        self.x
    }
    pub fn y(&self) -> T {
        self.y
    }
    pub fn z(&self) -> T {
        self.z
    }

    /// Components in `(w, x, y, z)` order.
    pub fn to_array(&self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &Self) -> T {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// The same rotation with all components negated.
    pub fn negated(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self ⊗ o`, renormalized.
    pub fn compose(&self, o: &Self) -> Self {
        let (a, b) = (self, o);
        Self::new_normalize(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, v: &Vec3<T>) -> Vec3<T> {
        // v' = v + 2w (q x v) + 2 q x (q x v)
        let q = Vec3::new(self.x, self.y, self.z);
        let two = T::lit(2.0);
        let t = q.cross(v).scale(two);
        *v + t.scale(self.w) + q.cross(&t)
    }

    pub fn to_matrix(&self) -> Mat3<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        let two = T::lit(2.0);
        [
            [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
            [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
            [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
        ]
    }

    /// Builds a quaternion from a rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Mat3<T>) -> Self {
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            Self::new_normalize(
                quarter * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new_normalize(
                (m[2][1] - m[1][2]) / s,
                quarter * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new_normalize(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                quarter * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            Self::new_normalize(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                quarter * s,
            )
        }
    }
}

/// Geodesic angle between two rotations, `2 acos(|<a, b>|)`, in `[0, pi]`.
///
/// Invariant to the sign of either argument.
pub fn quat_distance<T: Real>(a: &UnitQuaternion<T>, b: &UnitQuaternion<T>) -> T {
    // 2 acos|<a,b>| evaluated as 4 atan2(|a - sb|, |a + sb|), accurate near 0 and pi
    let s = if a.dot(b) < T::zero() { -T::one() } else { T::one() };
    let (aa, bb) = (a.to_array(), b.to_array());
    let mut diff = T::zero();
    let mut sum = T::zero();
    for i in 0..4 {
        let d = aa[i] - s * bb[i];
        let p = aa[i] + s * bb[i];
        diff += d * d;
        sum += p * p;
    }
    T::lit(4.0) * diff.sqrt().atan2(sum.sqrt())
}

/// Rotation angle about the world vertical axis: `atan2(R[1][0], R[0][0])`.
pub fn yaw_of<T: Real>(r: &UnitQuaternion<T>) -> T {
    let m = r.to_matrix();
    wrap_angle(m[1][0].atan2(m[0][0]))
}

/// Object, hand, camera or base pose.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose<T: Real> {
    pub position: Vec3<T>,
    pub orientation: UnitQuaternion<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vec3<T>, orientation: UnitQuaternion<T>) -> Self {
        Self { position, orientation }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), UnitQuaternion::identity())
    }

    /// `(px, py, pz, qw, qx, qy, qz)`.
    pub fn to_array7(&self) -> [T; 7] {
        let p = self.position;
        let q = self.orientation;
        [p.x, p.y, p.z, q.w, q.x, q.y, q.z]
    }

    pub fn from_slice7(s: &[T]) -> Result<Self, GeometryError> {
        if s.len() != 7 {
            return Err(GeometryError::WrongLength { expected: 7, got: s.len() });
        }
        Ok(Self::new(
            Vec3::new(s[0], s[1], s[2]),
            UnitQuaternion::try_new(s[3], s[4], s[5], s[6])?,
        ))
    }

    pub fn as_transform(&self) -> RigidTransform<T> {
        RigidTransform::new(self.orientation, self.position)
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform<T: Real> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn new(rotation: UnitQuaternion<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        compose(self, other)
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -inv.rotate(&self.translation))
    }

    pub fn apply_point(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn as_pose(&self) -> Pose<T> {
        Pose::new(self.translation, self.rotation)
    }
}

/// Composition applying `b` then `a`.
pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    RigidTransform::new(
        a.rotation.compose(&b.rotation),
        a.rotation.rotate(&b.translation) + a.translation,
    )
}

/// Left-multiplies a pose by a transform.
pub fn apply_transform<T: Real>(t: &RigidTransform<T>, p: &Pose<T>) -> Pose<T> {
    Pose::new(t.apply_point(&p.position), t.rotation.compose(&p.orientation))
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> CameraIntrinsics<T> {
    /// Returns `None` unless both focal lengths are positive.
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Option<Self> {
        (fx > T::zero() && fy > T::zero()).then_some(Self { fx, fy, cx, cy })
    }

    /// Unit bearing vector through a pixel.
    pub fn bearing(&self, px: &PixelPoint<T>) -> Vec3<T> {
        let v = Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, T::one());
        v.scale(T::one() / v.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelPoint<T> {
    pub u: T,
    pub v: T,
}

impl<T: Real> PixelPoint<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn distance_squared(&self, o: &Self) -> T {
        let du = self.u - o.u;
        let dv = self.v - o.v;
        du * du + dv * dv
    }
}

pub fn project<T: Real>(k: &CameraIntrinsics<T>, point: &Vec3<T>) -> Result<PixelPoint<T>, GeometryError> {
    if !(point.z > T::zero()) {
        return Err(GeometryError::NonPositiveDepth { z: point.z.to_f64_lossy() });
    }
    Ok(PixelPoint::new(k.fx * point.x / point.z + k.cx, k.fy * point.y / point.z + k.cy))
}

/// Back-projects a pixel at the given depth (camera-frame z).
pub fn lift<T: Real>(k: &CameraIntrinsics<T>, px: &PixelPoint<T>, depth: T) -> Result<Vec3<T>, GeometryError> {
    if !(depth > T::zero()) {
        return Err(GeometryError::NonPositiveDepth { z: depth.to_f64_lossy() });
    }
    Ok(Vec3::new((px.u - k.cx) * depth / k.fx, (px.v - k.cy) * depth / k.fy, depth))
}
