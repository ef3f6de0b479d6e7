//! Cameras, quaternions, covariance construction, and the two projections
//! (position to pixel, covariance to screen space) shared by the renderer,
//! the densification selector, and the scene generator.
//!
//! Conventions, fixed once for the whole crate:
//! - camera frame is right-handed with +x right, +y down, +z forward;
//! - extrinsics are stored world-to-camera;
//! - integer pixel coordinates address pixel centers, so the principal
//!   point (cx, cy) is in continuous pixel units;
//! - `Round` is round-half-away-from-zero (Rust `f64::round`), which makes
//!   the pixel projection bit-reproducible.

use crate::error::CoreError;
use crate::Result;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector3, Vector4};

/// Low-pass floor added to both diagonal entries of every projected 2D
/// covariance, in px². Keeps sub-pixel Gaussians rasterizable.
pub const COV2D_FLOOR: f64 = 0.3;

// ---------------------------------------------------------------------------
// Quaternions
// ---------------------------------------------------------------------------

/// Quaternion in (w, x, y, z) order. Not automatically normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quat> {
        let n = self.norm();
        if n <= 0.0 || !n.is_finite() {
            return Err(CoreError::DegenerateRotation);
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let a = axis.normalize() * (angle * 0.5).sin();
        Quat::new((angle * 0.5).cos(), a.x, a.y, a.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Quat {
        Quat::new(a[0], a[1], a[2], a[3])
    }
}

/// Hamilton product a·b.
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    Quat::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Rotation matrix of a quaternion (normalized internally).
///
/// R = | 1-2(y²+z²)   2(xy-wz)    2(xz+wy)  |
///     | 2(xy+wz)     1-2(x²+z²)  2(yz-wx)  |
///     | 2(xz-wy)     2(yz+wx)    1-2(x²+y²)|
pub fn quat_to_rotmat(q: Quat) -> Result<Matrix3<f64>> {
    let q = q.normalized()?;
    Ok(rotmat_of_unit(q))
}

/// Rotation matrix of an already-normalized quaternion.
pub fn rotmat_of_unit(q: Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
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

/// ∂R/∂q̂ for a unit quaternion, one 3×3 per component (w, x, y, z).
pub fn rotmat_grad_of_unit(q: Quat) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Pull a gradient w.r.t. a unit quaternion back to the raw (unnormalized)
/// quaternion: dL/dq = (I − q̂q̂ᵀ)/‖q‖ · dL/dq̂.
pub fn backprop_quat_normalize(raw: Quat, grad_unit: [f64; 4]) -> [f64; 4] {
    let n = raw.norm();
    let u = [raw.w / n, raw.x / n, raw.y / n, raw.z / n];
    let dot: f64 = (0..4).map(|i| u[i] * grad_unit[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (grad_unit[i] - u[i] * dot) / n;
    }
    out
}

/// 4×4 matrix L(a) with L(a)·b = a⊗b (quaternions as column (w,x,y,z)).
pub fn quat_left_matrix(a: Quat) -> Matrix4<f64> {
    Matrix4::new(
        a.w, -a.x, -a.y, -a.z, //
        a.x, a.w, -a.z, a.y, //
        a.y, a.z, a.w, -a.x, //
        a.z, -a.y, a.x, a.w,
    )
}

// ---------------------------------------------------------------------------
// Axis-aligned bounding box
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut bb = Aabb { min: first, max: first };
        for p in it {
            bb.min = bb.min.inf(p);
            bb.max = bb.max.sup(p);
        }
        Some(bb)
    }

    /// Grow by `frac` of the extent on every side (degenerate extents get a
    /// small absolute pad so normalization stays well defined).
    pub fn padded(&self, frac: f64) -> Aabb {
        let ext = (self.max - self.min).map(|e| (e * frac).max(1e-6));
        Aabb { min: self.min - ext, max: self.max + ext }
    }

    /// Normalize a point into [0,1]³, clamping outside points to the box.
    pub fn normalize_clamped(&self, p: Vector3<f64>) -> Vector3<f64> {
        let ext = self.max - self.min;
        Vector3::new(
            ((p.x - self.min.x) / ext.x).clamp(0.0, 1.0),
            ((p.y - self.min.y) / ext.y).clamp(0.0, 1.0),
            ((p.z - self.min.z) / ext.z).clamp(0.0, 1.0),
        )
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }
}

// ---------------------------------------------------------------------------
// Covariance
// ---------------------------------------------------------------------------

/// Symmetric 3×3 covariance, upper-triangular storage
/// [xx, xy, xz, yy, yz, zz] in scene units².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3D(pub [f64; 6]);

impl Covariance3D {
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Covariance3D {
        Covariance3D([m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]])
    }
}

/// Σ = R S Sᵀ Rᵀ with S = diag(scale). Scale components must be positive.
pub fn build_covariance(scale: Vector3<f64>, q: Quat) -> Result<Covariance3D> {
    for &s in scale.iter() {
        if !(s > 0.0) {
            return Err(CoreError::NonPositiveScale(s));
        }
    }
    let r = quat_to_rotmat(q)?;
    let d = Matrix3::from_diagonal(&scale.component_mul(&scale));
    Ok(Covariance3D::from_matrix(&(r * d * r.transpose())))
}

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

/// Pinhole camera with precomposed full projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rigid world-to-camera transform; upper-left 3×3 is orthonormal.
    pub world_to_camera: Matrix4<f64>,
    /// Composition of the NDC intrinsic map and the extrinsics; clip
    /// coordinates are `full_projection · [p; 1]` with w = camera-frame z.
    pub full_projection: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

/// Result of projecting a 3D position to the pixel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelProjection {
    /// Rounded pixel coordinates plus camera-frame depth.
    Visible { px: i64, py: i64, depth: f64 },
    BehindCamera,
}

impl Camera {
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
        near: f64,
        far: f64,
    ) -> Result<Camera> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CoreError::InvalidCamera(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(CoreError::InvalidCamera(format!("principal point ({cx}, {cy}) outside image {width}x{height}")));
        }
        if !(near > 0.0 && far > near) {
            return Err(CoreError::InvalidCamera(format!("require 0 < near < far, got near={near} far={far}")));
        }
        let r = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(CoreError::InvalidCamera(format!("extrinsic rotation not orthonormal (deviation {dev:.2e})")));
        }
        let bottom = world_to_camera.row(3);
        if bottom != Matrix4::identity().row(3) {
            return Err(CoreError::InvalidCamera("last extrinsic row must be [0 0 0 1]".into()));
        }

        let full_projection = ndc_from_camera(width, height, fx, fy, cx, cy, near, far) * world_to_camera;
        let cam = Camera { width, height, fx, fy, cx, cy, world_to_camera, full_projection, near, far };

        // Consistency: the clip-space path and the direct pinhole path must
        // land on the same pixel for a known in-frustum point.
        let p_cam = Vector3::new(0.1, -0.07, 0.5 * (near + far));
        let p_world = cam.camera_to_world_point(p_cam);
        if let PixelProjection::Visible { px, py, .. } = cam.project_position(p_world) {
            let (u, v) = cam.pinhole_pixel(p_cam);
            if (px as f64 - u).abs() > 0.501 || (py as f64 - v).abs() > 0.501 {
                return Err(CoreError::InvalidCamera("full projection inconsistent with intrinsics+extrinsics".into()));
            }
        } else {
            return Err(CoreError::InvalidCamera("frustum-center probe projected behind camera".into()));
        }
        Ok(cam)
    }

    /// Camera placed at `eye`, forward axis toward `target`, with `up`
    /// fixing the roll (scene up, typically +z).
    pub fn look_at(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Camera> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| CoreError::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| CoreError::InvalidCamera("view direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let mut w2c = Matrix4::identity();
        for (row, axis) in [right, down, forward].iter().enumerate() {
            w2c[(row, 0)] = axis.x;
            w2c[(row, 1)] = axis.y;
            w2c[(row, 2)] = axis.z;
            w2c[(row, 3)] = -axis.dot(&eye);
        }
        let (cx, cy) = ((width as f64 - 1.0) * 0.5, (height as f64 - 1.0) * 0.5);
        Camera::new(width, height, fx, fy, cx, cy, w2c, near, far)
    }

    /// Camera center in world coordinates: −Rᵀt.
    pub fn center_world(&self) -> Vector3<f64> {
        let r = self.world_to_camera.fixed_view::<3, 3>(0, 0);
        let t = Vector3::new(self.world_to_camera[(0, 3)], self.world_to_camera[(1, 3)], self.world_to_camera[(2, 3)]);
        -(r.transpose() * t)
    }

    /// World point into the camera frame.
    pub fn world_to_camera_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        let h = self.world_to_camera * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(h.x, h.y, h.z)
    }

    /// Inverse of `world_to_camera_point` (rigid transform inverse).
    pub fn camera_to_world_point(&self, p_cam: Vector3<f64>) -> Vector3<f64> {
        let r = self.world_to_camera.fixed_view::<3, 3>(0, 0);
        let t = Vector3::new(self.world_to_camera[(0, 3)], self.world_to_camera[(1, 3)], self.world_to_camera[(2, 3)]);
        r.transpose() * (p_cam - t)
    }

    /// Continuous pinhole pixel coordinates of a camera-frame point.
    pub fn pinhole_pixel(&self, p_cam: Vector3<f64>) -> (f64, f64) {
        (self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy)
    }

    /// Back-project a continuous pixel at camera-frame depth z.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let p_cam = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.camera_to_world_point(p_cam)
    }

    /// Project a world position to the integer pixel grid.
    ///
    /// Follows the clip-space route: multiply by the full projection matrix,
    /// divide by the homogeneous coordinate, then map normalized device
    /// coordinates to pixels via Round(0.5·((n+1)·extent − 1)). Points with
    /// homogeneous coordinate ≤ near are flagged, not an error.
    pub fn project_position(&self, p: Vector3<f64>) -> PixelProjection {
        let h = self.full_projection * Vector4::new(p.x, p.y, p.z, 1.0);
        let w = h.w;
        if w <= self.near {
            return PixelProjection::BehindCamera;
        }
        let x_norm = h.x / w;
        let y_norm = h.y / w;
        let px = (0.5 * ((x_norm + 1.0) * self.width as f64 - 1.0)).round() as i64;
        let py = (0.5 * ((y_norm + 1.0) * self.height as f64 - 1.0)).round() as i64;
        PixelProjection::Visible { px, py, depth: w }
    }

    /// Jacobian of the pinhole pixel map at a camera-frame point.
    ///
    /// J = | fx/z    0    −fx·x/z² |
    ///     |  0    fy/z   −fy·y/z² |
    pub fn perspective_jacobian(&self, p_cam: Vector3<f64>) -> Matrix2x3<f64> {
        let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        Matrix2x3::new(self.fx * iz, 0.0, -self.fx * x * iz2, 0.0, self.fy * iz, -self.fy * y * iz2)
    }

    /// EWA projection of a world covariance to screen space:
    /// Σ₂D = J W Σ Wᵀ Jᵀ plus the low-pass diagonal floor.
    pub fn project_covariance(&self, p: Vector3<f64>, cov: &Covariance3D) -> Result<Matrix2<f64>> {
        let p_cam = self.world_to_camera_point(p);
        if p_cam.z <= self.near {
            return Err(CoreError::BehindCamera);
        }
        let j = self.perspective_jacobian(p_cam);
        let w = self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let m = j * w;
        let mut c2 = m * cov.to_matrix() * m.transpose();
        c2[(0, 0)] += COV2D_FLOOR;
        c2[(1, 1)] += COV2D_FLOOR;
        // symmetrize against fp drift
        let off = 0.5 * (c2[(0, 1)] + c2[(1, 0)]);
        c2[(0, 1)] = off;
        c2[(1, 0)] = off;
        Ok(c2)
    }
}

/// Intrinsic map from camera frame to clip space. The homogeneous
/// coordinate equals camera z; x/y columns are chosen so that the NDC→pixel
/// formula in `project_position` reproduces fx·x/z + cx exactly.
fn ndc_from_camera(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64, near: f64, far: f64) -> Matrix4<f64> {
    let (w, h) = (width as f64, height as f64);
    let zs = (far + near) / (far - near);
    let zb = -2.0 * far * near / (far - near);
    Matrix4::new(
        2.0 * fx / w, 0.0, (2.0 * cx + 1.0 - w) / w, 0.0, //
        0.0, 2.0 * fy / h, (2.0 * cy + 1.0 - h) / h, 0.0, //
        0.0, 0.0, zs, zb, //
        0.0, 0.0, 1.0, 0.0,
    )
}
