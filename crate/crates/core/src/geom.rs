//! Vectors, rotations, oriented boxes and the ray / overlap queries built on them.
//!
//! World frame: `z` is vertical (up), `y` points from the robot base towards the
//! support, `x` completes a right-handed frame. Yaw is rotation about world `z`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lengths at or below this are treated as zero by [`normalize`].
pub const ZERO_LENGTH: f64 = 1e-12;

/// Separations smaller than this count as touching in [`obb_overlap`].
pub const TOUCH_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("cannot normalize a vector of length {0:e}")]
    ZeroLength(f64),
    #[error("bad shape dimensions: {0}")]
    BadDims(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn min_elem(self) -> f64 {
        self.x.min(self.y).min(self.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Unit vector parallel to `v`.
///
/// Fails with [`GeomError::ZeroLength`] when `|v| <= 1e-12`; callers computing a
/// direction towards a target must handle the "already there" case themselves.
pub fn normalize(v: Vec3) -> Result<Vec3, GeomError> {
    let n = v.norm();
    if !(n > ZERO_LENGTH) {
        return Err(GeomError::ZeroLength(n));
    }
    Ok(v / n)
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a rotation from raw components, renormalizing them.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Rotation { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn from_axis_angle(axis: Vec3, radians: f64) -> Self {
        let a = normalize(axis).unwrap_or(Vec3::Z);
        let (s, c) = (radians * 0.5).sin_cos();
        Rotation { w: c, x: a.x * s, y: a.y * s, z: a.z * s }
    }

    pub fn from_yaw_deg(deg: f64) -> Self {
        Self::from_axis_angle(Vec3::Z, deg.to_radians())
    }

    /// Rotation whose columns are the given orthonormal right-handed basis.
    pub fn from_basis(bx: Vec3, by: Vec3, bz: Vec3) -> Self {
        let (m00, m01, m02) = (bx.x, by.x, bz.x);
        let (m10, m11, m12) = (bx.y, by.y, bz.y);
        let (m20, m21, m22) = (bx.z, by.z, bz.z);
        let trace = m00 + m11 + m22;
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m21 - m12) / s;
            y = (m02 - m20) / s;
            z = (m10 - m01) / s;
        } else if m00 > m11 && m00 > m22 {
            let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
            w = (m21 - m12) / s;
            x = 0.25 * s;
            y = (m01 + m10) / s;
            z = (m02 + m20) / s;
        } else if m11 > m22 {
            let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
            w = (m02 - m20) / s;
            x = (m01 + m10) / s;
            y = 0.25 * s;
            z = (m12 + m21) / s;
        } else {
            let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
            w = (m10 - m01) / s;
            x = (m02 + m20) / s;
            y = (m12 + m21) / s;
            z = 0.25 * s;
        }
        Self::from_quaternion(w, x, y, z)
    }

    pub fn inverse(self) -> Self {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let q = Vec3::new(self.x, self.y, self.z);
        let t = q.cross(v) * 2.0;
        v + t * self.w + q.cross(t)
    }

    /// Local axes expressed in the parent frame (columns of the rotation matrix).
    pub fn axes(self) -> [Vec3; 3] {
        [self.rotate(Vec3::X), self.rotate(Vec3::Y), self.rotate(Vec3::Z)]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Heading of the rotated `x` axis about world `z`, degrees in (-180, 180].
    pub fn yaw_deg(self) -> f64 {
        let fx = self.rotate(Vec3::X);
        wrap_deg(fx.y.atan2(fx.x).to_degrees())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    /// Hamilton product: `(a * b).rotate(v) == a.rotate(b.rotate(v))`.
    fn mul(self, b: Rotation) -> Rotation {
        let a = self;
        Rotation {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_deg(deg: f64) -> f64 {
    let mut d = deg % 360.0;
    if d <= -180.0 {
        d += 360.0;
    } else if d > 180.0 {
        d -= 360.0;
    }
    d
}

/// Wraps an angle in degrees into (-period/2, period/2].
pub fn wrap_deg_period(deg: f64, period: f64) -> f64 {
    let half = period * 0.5;
    let mut d = deg % period;
    if d <= -half {
        d += period;
    } else if d > half {
        d -= period;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Rotation,
}

impl Pose {
    pub fn new(position: Vec3, rotation: Rotation) -> Self {
        Self { position, rotation }
    }

    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw_deg: f64) -> Self {
        Self::new(Vec3::new(x, y, z), Rotation::from_yaw_deg(yaw_deg))
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.position + self.rotation.rotate(p)
    }

    pub fn inverse_transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation.inverse().rotate(p - self.position)
    }

    /// Places a box given in this pose's local frame into the parent frame.
    pub fn transform_obb(&self, b: &Obb) -> Obb {
        Obb {
            center: self.transform_point(b.center),
            half_extents: b.half_extents,
            rotation: self.rotation * b.rotation,
        }
    }
}

/// Oriented box: solid `{c + R·p : |p_i| <= h_i}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub rotation: Rotation,
}

impl Obb {
    pub fn new(center: Vec3, half_extents: Vec3, rotation: Rotation) -> Self {
        Self { center, half_extents, rotation }
    }

    pub fn axis_aligned(center: Vec3, half_extents: Vec3) -> Self {
        Self::new(center, half_extents, Rotation::IDENTITY)
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.x * self.half_extents.y * self.half_extents.z
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.rotation.inverse().rotate(p - self.center);
        l.x.abs() <= self.half_extents.x
            && l.y.abs() <= self.half_extents.y
            && l.z.abs() <= self.half_extents.z
    }

    /// Signed distance from `p` to the box surface (negative inside).
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let l = self.rotation.inverse().rotate(p - self.center).abs() - self.half_extents;
        let outside = Vec3::new(l.x.max(0.0), l.y.max(0.0), l.z.max(0.0)).norm();
        outside + l.x.max(l.y).max(l.z).min(0.0)
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.half_extents;
        let mut out = [Vec3::ZERO; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let s = Vec3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
            *c = self.center + self.rotation.rotate(s);
        }
        out
    }

    /// Lowest and highest world `z` reached by the box.
    pub fn z_extent(&self) -> (f64, f64) {
        let [ax, ay, az] = self.rotation.axes();
        let h = self.half_extents;
        let r = h.x * ax.z.abs() + h.y * ay.z.abs() + h.z * az.z.abs();
        (self.center.z - r, self.center.z + r)
    }
}

/// Hit record of a ray against a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    /// Outward surface normal of the face that was hit, world frame.
    pub normal: Vec3,
}

/// Distance along a unit ray to the first box surface point with `t >= 0`.
///
/// A ray starting inside the box reports the exit face.
pub fn ray_obb_intersect(origin: Vec3, dir: Vec3, b: &Obb) -> Option<f64> {
    ray_obb_hit(origin, dir, b).map(|h| h.t)
}

/// Slab test in the box frame; also reports the hit face normal.
pub fn ray_obb_hit(origin: Vec3, dir: Vec3, b: &Obb) -> Option<RayHit> {
    let inv = b.rotation.inverse();
    let o = inv.rotate(origin - b.center).to_array();
    let d = inv.rotate(dir).to_array();
    let h = b.half_extents.to_array();

    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = (0usize, 0.0f64);
    let mut far_axis = (0usize, 0.0f64);
    for i in 0..3 {
        if d[i].abs() < 1e-300 {
            if o[i].abs() > h[i] {
                return None;
            }
            continue;
        }
        let inv_d = 1.0 / d[i];
        let mut t0 = (-h[i] - o[i]) * inv_d;
        let mut t1 = (h[i] - o[i]) * inv_d;
        // entry face normal opposes the ray direction
        let mut s0 = -1.0;
        let mut s1 = 1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            std::mem::swap(&mut s0, &mut s1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = (i, s0);
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = (i, s1);
        }
        if t_near > t_far {
            return None;
        }
    }
    let (t, (axis, sign)) = if t_near >= 0.0 {
        (t_near, near_axis)
    } else if t_far >= 0.0 {
        (t_far, far_axis)
    } else {
        return None;
    };
    let mut local_n = [0.0; 3];
    local_n[axis] = sign;
    Some(RayHit { t, normal: b.rotation.rotate(Vec3::from_array(local_n)) })
}

/// Separating-axis test over the 15 candidate axes of two boxes.
///
/// Boxes whose separation along every axis is below [`TOUCH_MARGIN`] count as
/// overlapping, so touching faces report `true`.
pub fn obb_overlap(a: &Obb, b: &Obb) -> bool {
    let aa = a.rotation.axes();
    let ba = b.rotation.axes();
    let ah = a.half_extents.to_array();
    let bh = b.half_extents.to_array();
    let t = b.center - a.center;

    let separated_on = |l: Vec3| -> bool {
        let ra: f64 = (0..3).map(|i| ah[i] * aa[i].dot(l).abs()).sum();
        let rb: f64 = (0..3).map(|i| bh[i] * ba[i].dot(l).abs()).sum();
        t.dot(l).abs() > ra + rb + TOUCH_MARGIN
    };

    for l in aa.iter().chain(ba.iter()) {
        if separated_on(*l) {
            return false;
        }
    }
    for u in &aa {
        for v in &ba {
            let c = u.cross(*v);
            let n = c.norm();
            // parallel edges: the face axes already cover this direction
            if n < 1e-9 {
                continue;
            }
            if separated_on(c / n) {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    LShape,
    UShape,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Box, ShapeKind::LShape, ShapeKind::UShape];

    /// Yaw period of the top face outline: a rectangle repeats every 180 degrees.
    pub fn yaw_period_deg(self) -> f64 {
        match self {
            ShapeKind::Box => 180.0,
            ShapeKind::LShape | ShapeKind::UShape => 360.0,
        }
    }
}

/// A block built from axis-aligned sub-boxes in its own frame. The union's
/// bounding box is centred on the local origin and spans `dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    pub kind: ShapeKind,
    pub dims: Vec3,
    pub wall_thickness: f64,
    pub parts: Vec<Obb>,
}

impl ShapeModel {
    pub fn volume(&self) -> f64 {
        self.parts.iter().map(Obb::volume).sum()
    }

    /// Closed-form volume of the shape, independent of the part layout.
    pub fn expected_volume(&self) -> f64 {
        let d = self.dims;
        let w = self.wall_thickness;
        match self.kind {
            ShapeKind::Box => d.x * d.y * d.z,
            ShapeKind::LShape => d.x * d.y * d.z - (d.x - w) * (d.y - w) * d.z,
            ShapeKind::UShape => d.x * d.y * d.z - (d.x - 2.0 * w) * (d.y - w) * d.z,
        }
    }
}

/// Builds a box, L or U block.
///
/// L: a full-width bar along `x` at the `-y` edge plus an arm along `y` at the `-x`
/// edge. U: the same base bar with arms at both `x` edges.
pub fn compose_shape(kind: ShapeKind, dims: Vec3, wall_thickness: f64) -> Result<ShapeModel, GeomError> {
    if !(dims.x > 0.0 && dims.y > 0.0 && dims.z > 0.0) || !dims.is_finite() {
        return Err(GeomError::BadDims(format!("dims must be positive, got {dims:?}")));
    }
    let (dx, dy, dz) = (dims.x, dims.y, dims.z);
    let parts = match kind {
        ShapeKind::Box => vec![Obb::axis_aligned(Vec3::ZERO, dims * 0.5)],
        ShapeKind::LShape | ShapeKind::UShape => {
            let min_lateral = dx.min(dy);
            let w = wall_thickness;
            if !(w > 0.0 && w < min_lateral) {
                return Err(GeomError::BadDims(format!(
                    "wall thickness {w} must lie in (0, {min_lateral})"
                )));
            }
            if kind == ShapeKind::UShape && 2.0 * w >= dx {
                return Err(GeomError::BadDims(format!(
                    "U walls of {w} leave no channel in width {dx}"
                )));
            }
            let base = Obb::axis_aligned(
                Vec3::new(0.0, -dy / 2.0 + w / 2.0, 0.0),
                Vec3::new(dx / 2.0, w / 2.0, dz / 2.0),
            );
            let arm_len = dy - w;
            let arm_y = -dy / 2.0 + w + arm_len / 2.0;
            let arm_half = Vec3::new(w / 2.0, arm_len / 2.0, dz / 2.0);
            let left = Obb::axis_aligned(Vec3::new(-dx / 2.0 + w / 2.0, arm_y, 0.0), arm_half);
            if kind == ShapeKind::LShape {
                vec![base, left]
            } else {
                let right = Obb::axis_aligned(Vec3::new(dx / 2.0 - w / 2.0, arm_y, 0.0), arm_half);
                vec![base, left, right]
            }
        }
    };
    Ok(ShapeModel { kind, dims, wall_thickness, parts })
}

/// Volume-weighted centroid of the part union, shape frame.
pub fn shape_centroid(s: &ShapeModel) -> Vec3 {
    let mut acc = Vec3::ZERO;
    let mut vol = 0.0;
    for p in &s.parts {
        let v = p.volume();
        acc += p.center * v;
        vol += v;
    }
    acc / vol
}
