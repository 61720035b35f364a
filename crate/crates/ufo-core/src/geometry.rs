//! Shared geometric vocabulary: cameras, rays, rigid transforms,
//! quaternions, and frustum tests.
//!
//! Conventions: +z forward, +x right, +y down, pixel origin top-left,
//! pixel centers at integer + 0.5. Quaternions are stored (w, x, y, z)
//! with w >= 0.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("singular-input error: {0}")]
    Singular(String),
}

pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 200.0;

/// World-from-camera rigid pose plus capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub world_from_camera: Matrix4<f64>,
    pub timestamp: f64,
}

impl CameraPose {
    pub fn new(world_from_camera: Matrix4<f64>, timestamp: f64) -> Self {
        debug_assert!(is_rigid(&world_from_camera, 1e-5));
        CameraPose {
            world_from_camera,
            timestamp,
        }
    }

    pub fn identity(timestamp: f64) -> Self {
        CameraPose {
            world_from_camera: Matrix4::identity(),
            timestamp,
        }
    }

    pub fn camera_from_world(&self) -> Matrix4<f64> {
        rigid_inverse(&self.world_from_camera)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.world_from_camera.fixed_view::<3, 1>(0, 3).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    /// Symmetric pinhole with a given horizontal field of view (radians).
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Intrinsics {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }
}

/// Line through space as (unit direction, moment = origin x direction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay {
    pub direction: Vector3<f64>,
    pub moment: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_parts(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        RigidTransform { matrix: m }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into()
    }

    pub fn inverse(&self) -> Self {
        RigidTransform {
            matrix: rigid_inverse(&self.matrix),
        }
    }

    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            matrix: self.matrix * other.matrix,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        transform_point(&self.matrix, p)
    }
}

pub fn transform_point(m: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(h.x, h.y, h.z)
}

/// Inverse of a rigid 4x4 without a general solve.
pub fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
    let rt = r.transpose();
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(rt * t)));
    out
}

pub fn is_rigid(m: &Matrix4<f64>, tol: f64) -> bool {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let err = (r.transpose() * r - Matrix3::identity()).norm();
    let last_ok = (m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]) == (0.0, 0.0, 0.0, 1.0);
    err < tol && last_ok && r.determinant() > 0.0
}

// ── rays & frustum ──────────────────────────────────────────────────

/// World-frame ray through the center of pixel (u, v).
pub fn pixel_ray(
    pose: &CameraPose,
    k: &Intrinsics,
    u: f64,
    v: f64,
) -> Result<PluckerRay, GeometryError> {
    if !(0.0..k.width as f64).contains(&u) || !(0.0..k.height as f64).contains(&v) {
        return Err(GeometryError::Contract(format!(
            "pixel ({u}, {v}) outside {}x{}",
            k.width, k.height
        )));
    }
    Ok(pixel_ray_unchecked(pose, k, u, v))
}

pub fn pixel_ray_unchecked(pose: &CameraPose, k: &Intrinsics, u: f64, v: f64) -> PluckerRay {
    let d_cam = Vector3::new((u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, 1.0);
    let r: Matrix3<f64> = pose.world_from_camera.fixed_view::<3, 3>(0, 0).into();
    let direction = (r * d_cam).normalize();
    let origin = pose.center();
    PluckerRay {
        direction,
        moment: origin.cross(&direction),
    }
}

/// True iff the point projects inside the image with camera-frame depth in
/// [near, far].
pub fn in_frustum(p: &Vector3<f64>, pose: &CameraPose, k: &Intrinsics) -> bool {
    let pc = transform_point(&pose.camera_from_world(), p);
    if pc.z < k.near || pc.z > k.far {
        return false;
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64
}

/// World-space AABB of a camera frustum, for conservative voxel culling.
pub fn frustum_aabb(pose: &CameraPose, k: &Intrinsics) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let r: Matrix3<f64> = pose.world_from_camera.fixed_view::<3, 3>(0, 0).into();
    let c = pose.center();
    for &(u, v) in &[
        (0.0, 0.0),
        (k.width as f64, 0.0),
        (0.0, k.height as f64),
        (k.width as f64, k.height as f64),
    ] {
        let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let d = r * d_cam;
        for &depth in &[k.near, k.far] {
            let p = c + d * depth;
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    (lo, hi)
}

// ── rotations ───────────────────────────────────────────────────────

/// Orthogonal polar factor of M by Newton iteration, returned as a
/// canonical-sign quaternion. Rank-deficient or reflecting inputs error.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<[f64; 4], GeometryError> {
    let det = m.determinant();
    if det.abs() < 1e-12 {
        return Err(GeometryError::Singular(format!(
            "rank-deficient matrix, det = {det}"
        )));
    }
    if det < 0.0 {
        return Err(GeometryError::Singular(format!(
            "reflecting matrix, det = {det}"
        )));
    }
    let mut x = *m;
    for _ in 0..64 {
        let inv_t = match x.try_inverse() {
            Some(inv) => inv.transpose(),
            None => {
                return Err(GeometryError::Singular(
                    "polar iteration hit a singular iterate".into(),
                ))
            }
        };
        let next = (x + inv_t) * 0.5;
        let delta = (next - x).norm();
        x = next;
        if delta < 1e-14 {
            break;
        }
    }
    Ok(matrix_to_quat(&x))
}

/// Rotation matrix -> (w, x, y, z) with w >= 0.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(r);
    canonical_quat([q.w, q.i, q.j, q.k])
}

pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

pub fn canonical_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
    [q[0] * s, q[1] * s, q[2] * s, q[3] * s]
}

/// Hamilton product a ⊗ b, both (w, x, y, z).
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Slerp on rotations + lerp on translations.
pub fn interpolate_rigid(a: &RigidTransform, b: &RigidTransform, t: f64) -> RigidTransform {
    let qa = UnitQuaternion::from_matrix(&a.rotation());
    let qb = UnitQuaternion::from_matrix(&b.rotation());
    let q = qa.slerp(&qb, t);
    let tr = a.translation() * (1.0 - t) + b.translation() * t;
    RigidTransform::from_parts(&q.to_rotation_matrix().into_inner(), &tr)
}

/// Map token positions into the camera-centric frame of `pose` (features
/// untouched by construction: only positions pass through here).
pub fn to_local(positions: &[[f64; 3]], pose: &CameraPose) -> Vec<[f64; 3]> {
    let m = pose.camera_from_world();
    positions
        .iter()
        .map(|p| {
            let q = transform_point(&m, &Vector3::new(p[0], p[1], p[2]));
            [q.x, q.y, q.z]
        })
        .collect()
}

pub fn to_world(positions: &[[f64; 3]], pose: &CameraPose) -> Vec<[f64; 3]> {
    let m = pose.world_from_camera;
    positions
        .iter()
        .map(|p| {
            let q = transform_point(&m, &Vector3::new(p[0], p[1], p[2]));
            [q.x, q.y, q.z]
        })
        .collect()
}

/// True iff p lies inside the oriented box (pose maps box-local to world,
/// size = (l, w, h) along local x, z, y).
pub fn point_in_obb(p: &Vector3<f64>, box_pose: &RigidTransform, size: &[f64; 3]) -> bool {
    let local = box_pose.inverse().apply(p);
    local.x.abs() <= size[0] / 2.0 && local.z.abs() <= size[1] / 2.0 && local.y.abs() <= size[2] / 2.0
}

/// Eight corners of an oriented box in world coordinates.
pub fn obb_corners(box_pose: &RigidTransform, size: &[f64; 3]) -> [Vector3<f64>; 8] {
    let (hx, hz, hy) = (size[0] / 2.0, size[1] / 2.0, size[2] / 2.0);
    let mut out = [Vector3::zeros(); 8];
    let mut i = 0;
    for &sx in &[-1.0, 1.0] {
        for &sy in &[-1.0, 1.0] {
            for &sz in &[-1.0, 1.0] {
                out[i] = box_pose.apply(&Vector3::new(sx * hx, sy * hy, sz * hz));
                i += 1;
            }
        }
    }
    out
}
