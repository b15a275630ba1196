//! Rigid poses, pinhole cameras and ray generation.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] maps camera coordinates to world coordinates
//!   (`p_world = R p_cam + x`).
//! * Camera frame: `+z` forward, `+x` right, `+y` down.
//! * World frame: `+z` up, ground plane at `z = 0`.
//! * Quaternions are stored `(w, x, y, z)` and canonicalized to `w >= 0`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),
    #[error("non-finite pose component")]
    NonFinite,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfRange { u: f64, v: f64, width: u32, height: u32 },
    #[error("invalid ray: {0}")]
    InvalidRay(&'static str),
    #[error("pose csv {path}: {msg}")]
    Csv { path: String, msg: String },
}

/// Rigid transform, camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, normalizing it.
    pub fn new(q_wxyz: [f64; 4], translation: Vector3<f64>) -> Result<Self, GeomError> {
        if q_wxyz.iter().any(|c| !c.is_finite()) || translation.iter().any(|c| !c.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let q = Quaternion::new(q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3]);
        let n = q.norm();
        if n < 1e-12 {
            return Err(GeomError::DegenerateQuaternion(n));
        }
        Ok(Self {
            rotation: canonical(q),
            translation,
        })
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::from_parts(rot, translation)
    }

    /// Camera-to-world pose from columns `right, down, forward` of the rotation.
    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = UnitQuaternion::from_matrix(r);
        Self::from_parts(rot, translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation * other.rotation;
        Pose {
            rotation: canonical(q.into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: canonical(inv.into_inner()),
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

pub fn compose_pose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert_pose(a: &Pose) -> Pose {
    a.inverse()
}

/// Fixed rigid transform from the RGB camera frame to the depth sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Extrinsic(pub Pose);

impl Extrinsic {
    pub fn identity() -> Self {
        Self(Pose::identity())
    }

    pub fn pose(&self) -> &Pose {
        &self.0
    }
}

/// World pose of the depth sensor given the RGB camera pose.
pub fn rgb_to_depth_pose(t_rgb: &Pose, e: &Extrinsic) -> Pose {
    t_rgb.compose(&e.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans_m: f64,
}

/// Geodesic rotation angle (degrees) and translation distance (meters).
pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let rel = est.rotation.inverse() * gt.rotation;
    let q = rel.quaternion();
    let angle = 2.0 * q.imag().norm().atan2(q.w.abs());
    PoseError {
        rot_deg: angle.to_degrees(),
        trans_m: (est.translation - gt.translation).norm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "w")]
    pub width: u32,
    #[serde(rename = "h")]
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered pinhole camera with the given horizontal field of view.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeomError> {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeomError::InvalidIntrinsics("cx outside (0, width)"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics("cy outside (0, height)"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unit direction in the camera frame through the center of pixel `(u, v)`.
    pub fn camera_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(
            (u + 0.5 - self.cx) / self.fx,
            (v + 0.5 - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Result<Self, GeomError> {
        if ((direction.norm() - 1.0).abs()) > 1e-9 {
            return Err(GeomError::InvalidRay("direction is not unit length"));
        }
        if !(near >= 0.0 && near < far) {
            return Err(GeomError::InvalidRay("require 0 <= near < far"));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    pub fn with_bounds(mut self, near: f64, far: f64) -> Self {
        self.near = near;
        self.far = far;
        self
    }
}

/// World-space ray through the center of pixel `(u, v)`; bounds are `[0, inf)`.
pub fn ray_from_pixel(pose: &Pose, k: &Intrinsics, u: f64, v: f64) -> Result<Ray, GeomError> {
    if !(u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64) {
        return Err(GeomError::PixelOutOfRange {
            u,
            v,
            width: k.width,
            height: k.height,
        });
    }
    let d = pose.rotate(&k.camera_direction(u, v)).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction: d,
        near: 0.0,
        far: f64::INFINITY,
    })
}

/// Vector-Jacobian product of `y = R(q) v` with respect to the quaternion
/// components `(w, x, y, z)`, evaluated at a unit quaternion.
///
/// Off the unit sphere the result differs only in its radial component, which
/// a subsequent normalization backward pass removes.
pub fn rotate_vjp(q: &UnitQuaternion<f64>, v: &Vector3<f64>, g: &Vector3<f64>) -> [f64; 4] {
    let qq = q.quaternion();
    let w = qq.w;
    let u = qq.imag();
    // y = v + 2w (u x v) + 2 (u (u.v) - v (u.u))
    let gw = 2.0 * u.cross(v).dot(g);
    let gu = 2.0 * w * v.cross(g) + 2.0 * (u.dot(v) * g + v * u.dot(g) - 2.0 * u * v.dot(g));
    [gw, gu.x, gu.y, gu.z]
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    /// Overlap test on the xy footprint, with `gap` extra clearance.
    pub fn overlaps_xy(&self, other: &Aabb, gap: f64) -> bool {
        (0..2).all(|i| self.min[i] - gap < other.max[i] && other.min[i] - gap < self.max[i])
    }

    /// Entry/exit distances of the line `o + t d` (slab method), or `None`
    /// when it misses. Distances may be negative.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if d[i] == 0.0 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut a, mut b) = ((self.min[i] - o[i]) * inv, (self.max[i] - o[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// One `t,x,y,z,qw,qx,qy,qz` record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
}

impl PoseRow {
    pub fn new(t: f64, pose: &Pose) -> Self {
        let [qw, qx, qy, qz] = pose.quaternion_wxyz();
        let p = pose.translation();
        Self {
            t,
            x: p.x,
            y: p.y,
            z: p.z,
            qw,
            qx,
            qy,
            qz,
        }
    }

    pub fn pose(&self) -> Result<Pose, GeomError> {
        Pose::new([self.qw, self.qx, self.qy, self.qz], Vector3::new(self.x, self.y, self.z))
    }
}

pub fn write_pose_csv(path: &Path, rows: &[(f64, Pose)]) -> Result<(), GeomError> {
    let err = |e: csv::Error| GeomError::Csv {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for (t, pose) in rows {
        w.serialize(PoseRow::new(*t, pose)).map_err(err)?;
    }
    w.flush().map_err(|e| GeomError::Csv {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn read_pose_csv(path: &Path) -> Result<Vec<(f64, Pose)>, GeomError> {
    let ctx = |msg: String| GeomError::Csv {
        path: path.display().to_string(),
        msg,
    };
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ctx(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize::<PoseRow>().enumerate() {
        let row = rec.map_err(|e| ctx(e.to_string()))?;
        let pose = row.pose().map_err(|e| ctx(format!("line {}: {e}", i + 2)))?;
        out.push((row.t, pose));
    }
    Ok(out)
}
