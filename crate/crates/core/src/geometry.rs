//! Camera models, camera rigs, ray generation and ray/box clipping.
//!
//! Matrices are row-major and act on column vectors. A [`CameraPose`] always stores the
//! camera-to-world transform. The camera frame follows the transforms-file convention:
//! `+x` right, `+y` up, looking down `-z`.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Once;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Mat4 = [[f64; 4]; 4];

pub const IDENTITY: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Offset added to integer pixel coordinates to hit the pixel center.
pub const PIXEL_CENTER_OFFSET: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Scalar> Vec3<S> {
    #[inline]
    pub fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn splat(v: S) -> Self {
        Self::new(v, v, v)
    }

    #[inline]
    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm(self) -> S {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn normalized(self) -> Self {
        self / self.norm()
    }

    #[inline]
    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn from_array(a: [S; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn get(self, axis: usize) -> S {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    #[inline]
    pub fn cast<T: Scalar>(self) -> Vec3<T> {
        Vec3::new(
            T::lit(self.x.as_f64()),
            T::lit(self.y.as_f64()),
            T::lit(self.z.as_f64()),
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<S: Scalar> Add for Vec3<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Scalar> Sub for Vec3<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Scalar> Mul<S> for Vec3<S> {
    type Output = Self;
    #[inline]
    fn mul(self, s: S) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<S: Scalar> Div<S> for Vec3<S> {
    type Output = Self;
    #[inline]
    fn div(self, s: S) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

impl<S: Scalar> Neg for Vec3<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

pub fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rotation_error(m: &Mat4) -> (f64, f64) {
    let mut ortho = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((dot - target).abs());
        }
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    (ortho, det)
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraPose {
    matrix: Mat4,
}

impl CameraPose {
    /// Default tolerance on `RᵀR - I` and `det R - 1`.
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(matrix: Mat4) -> Result<Self> {
        Self::with_tolerance(matrix, Self::TOLERANCE)
    }

    pub fn with_tolerance(matrix: Mat4, tol: f64) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let bottom = matrix[3];
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > tol {
            return Err(Error::InvalidMatrix(format!(
                "bottom row {bottom:?} is not [0, 0, 0, 1]"
            )));
        }
        let (ortho, det) = rotation_error(&matrix);
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::InvalidMatrix(format!(
                "rotation block not orthonormal (max |RᵀR - I| = {ortho:.3e}, det = {det:.9})"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self { matrix: IDENTITY }
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.matrix
    }

    pub fn center(&self) -> Vec3<f64> {
        Vec3::new(self.matrix[0][3], self.matrix[1][3], self.matrix[2][3])
    }

    fn column(&self, j: usize) -> Vec3<f64> {
        Vec3::new(self.matrix[0][j], self.matrix[1][j], self.matrix[2][j])
    }

    pub fn right(&self) -> Vec3<f64> {
        self.column(0)
    }

    pub fn up(&self) -> Vec3<f64> {
        self.column(1)
    }

    /// Viewing direction in world space (the camera's `-z` axis).
    pub fn forward(&self) -> Vec3<f64> {
        -self.column(2)
    }

    pub fn rotate(&self, v: Vec3<f64>) -> Vec3<f64> {
        self.right() * v.x + self.up() * v.y + self.column(2) * v.z
    }

    pub fn transform_point(&self, p: Vec3<f64>) -> Vec3<f64> {
        self.rotate(p) + self.center()
    }

    /// World point expressed in the camera frame.
    pub fn world_to_camera(&self, p: Vec3<f64>) -> Vec3<f64> {
        let q = p - self.center();
        Vec3::new(q.dot(self.right()), q.dot(self.up()), q.dot(self.column(2)))
    }
}

/// Pinhole camera with stored (unused) lens distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    pub pose: CameraPose,
}

static DISTORTION_WARNING: Once = Once::new();

impl CameraModel {
    /// Undistorted camera with the principal point at the image center.
    pub fn pinhole(width: u32, height: u32, fx: f64, fy: f64, pose: CameraPose) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera from a horizontal field of view.
    pub fn from_fov_x(width: u32, height: u32, fov_x: f64, pose: CameraPose) -> Result<Self> {
        if !(fov_x > 0.0 && fov_x < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("fov_x = {fov_x} not in (0, pi)")));
        }
        let f = focal_from_fov(width, fov_x);
        Self::pinhole(width, height, f, f, pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidArgument(format!(
                "image size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside the image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2].iter().any(|&k| k != 0.0)
    }

    pub fn fov(&self) -> (f64, f64) {
        fov_from_intrinsics(self.width, self.height, self.fx, self.fy)
    }

    /// Ray through the center of integer pixel `(px, py)`.
    pub fn generate_ray(&self, px: u32, py: u32) -> Result<Ray<f64>> {
        if px >= self.width || py >= self.height {
            return Err(Error::PixelOutOfBounds {
                x: px,
                y: py,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.ray_through(px as f64 + PIXEL_CENTER_OFFSET, py as f64 + PIXEL_CENTER_OFFSET))
    }

    /// Ray through continuous image coordinates `(u, v)`, `v` growing downwards.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray<f64> {
        if self.has_distortion() {
            DISTORTION_WARNING.call_once(|| {
                log::warn!("camera distortion coefficients are ignored by ray generation");
            });
        }
        let dir_cam = Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0);
        Ray::new(self.pose.center(), self.pose.rotate(dir_cam))
    }

    /// Pinhole projection of a world point; `None` when the point is behind the camera.
    pub fn project(&self, p: Vec3<f64>) -> Option<(f64, f64)> {
        let q = self.pose.world_to_camera(p);
        if q.z >= 0.0 {
            return None;
        }
        let depth = -q.z;
        Some((self.cx + self.fx * q.x / depth, self.cy - self.fy * q.y / depth))
    }
}

pub fn focal_from_fov(width: u32, fov_x: f64) -> f64 {
    (width as f64 / 2.0) / (fov_x / 2.0).tan()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<S> {
    pub origin: Vec3<S>,
    pub dir: Vec3<S>,
}

impl<S: Scalar> Ray<S> {
    /// Normalizes `dir`.
    pub fn new(origin: Vec3<S>, dir: Vec3<S>) -> Self {
        Self {
            origin,
            dir: dir.normalized(),
        }
    }

    #[inline]
    pub fn at(&self, t: S) -> Vec3<S> {
        self.origin + self.dir * t
    }

    pub fn cast<T: Scalar>(&self) -> Ray<T> {
        Ray {
            origin: self.origin.cast(),
            dir: self.dir.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayInterval<S> {
    pub t_in: S,
    pub t_out: S,
}

impl<S: Scalar> RayInterval<S> {
    pub fn length(&self) -> S {
        self.t_out - self.t_in
    }
}

/// Slab test against `[-half_extent, half_extent]³`, restricted to `t >= 0`.
pub fn clip_ray_to_box<S: Scalar>(ray: &Ray<S>, half_extent: S) -> Option<RayInterval<S>> {
    let mut t_near = S::neg_infinity();
    let mut t_far = S::infinity();
    for axis in 0..3 {
        let o = ray.origin.get(axis);
        let inv = S::one() / ray.dir.get(axis);
        let t1 = (-half_extent - o) * inv;
        let t2 = (half_extent - o) * inv;
        // `min`/`max` drop the NaN produced by 0 * inf for rays lying in a slab plane
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    let t_in = t_near.max(S::zero());
    if t_far < t_in || !t_far.is_finite() {
        return None;
    }
    Some(RayInterval { t_in, t_out: t_far })
}

pub const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653; // pi * (3 - sqrt 5)

pub fn golden_angle() -> f64 {
    std::f64::consts::PI * (3.0 - 5f64.sqrt())
}

/// Azimuth of camera `i` in a Fibonacci rig, in `[0, 2pi)`.
pub fn fibonacci_azimuth(i: usize) -> f64 {
    (golden_angle() * i as f64).rem_euclid(std::f64::consts::TAU)
}

/// Quasi-uniform camera centers on the upper hemisphere of radius `radius`.
pub fn fibonacci_camera_positions(count: usize, radius: f64) -> Result<Vec<Vec3<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("camera count must be at least 1".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    Ok((0..count)
        .map(|i| {
            let z = radius * (1.0 - i as f64 / count as f64);
            let theta = fibonacci_azimuth(i);
            let r = (radius * radius - z * z).max(0.0).sqrt();
            Vec3::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect())
}

/// Pose at `position` looking at `target` with `up` as the world up hint.
pub fn look_at_pose(position: Vec3<f64>, target: Vec3<f64>, up: Vec3<f64>) -> Result<CameraPose> {
    let view = target - position;
    if !(view.norm() > 0.0) {
        return Err(Error::DegenerateGeometry("camera position equals its target".into()));
    }
    if !(up.norm() > 0.0) {
        return Err(Error::DegenerateGeometry("zero up vector".into()));
    }
    let forward = view.normalized();
    let side = forward.cross(up.normalized());
    // |f x u| = sin(angle between them)
    if side.norm() < 1e-6_f64.sin() {
        return Err(Error::DegenerateGeometry(
            "up vector is parallel to the viewing direction".into(),
        ));
    }
    let right = side.normalized();
    let cam_up = right.cross(forward);
    let back = -forward;
    let matrix = [
        [right.x, cam_up.x, back.x, position.x],
        [right.y, cam_up.y, back.y, position.y],
        [right.z, cam_up.z, back.z, position.z],
        [0.0, 0.0, 0.0, 1.0],
    ];
    Ok(CameraPose { matrix })
}

/// Look-at with `+Z` up, falling back to `+Y` for cameras directly above or below the target.
pub fn look_at_zup(position: Vec3<f64>, target: Vec3<f64>) -> Result<CameraPose> {
    match look_at_pose(position, target, Vec3::new(0.0, 0.0, 1.0)) {
        Err(Error::DegenerateGeometry(_)) if position != target => {
            look_at_pose(position, target, Vec3::new(0.0, 1.0, 0.0))
        }
        other => other,
    }
}

/// Horizontal and vertical field of view in radians.
pub fn fov_from_intrinsics(width: u32, height: u32, fx: f64, fy: f64) -> (f64, f64) {
    (
        2.0 * ((width as f64 / 2.0) / fx).atan(),
        2.0 * ((height as f64 / 2.0) / fy).atan(),
    )
}

/// Camera-to-world pose from a world-to-camera extrinsic matrix `[R t; 0 1]`.
pub fn invert_extrinsics(world_to_camera: &Mat4) -> Result<CameraPose> {
    let m = world_to_camera;
    let bottom = m[3];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::InvalidMatrix(format!(
            "bottom row {bottom:?} is not [0, 0, 0, 1]"
        )));
    }
    let (ortho, det) = rotation_error(m);
    if ortho > 1e-4 || (det - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidMatrix(format!(
            "extrinsic rotation not orthonormal (max |RᵀR - I| = {ortho:.3e}, det = {det:.6})"
        )));
    }
    let mut out = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
        out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    Ok(CameraPose { matrix: out })
}

/// Y-up to Z-up change of basis applied to Panoptic-style poses.
pub const Y_TO_Z: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Half turn about the x axis.
pub const X_HALF_TURN: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// `X_HALF_TURN * Y_TO_Z`.
pub fn panoptic_alignment() -> Mat4 {
    mat_mul(&X_HALF_TURN, &Y_TO_Z)
}

/// Re-expresses a Y-up camera-to-world pose in the Z-up world frame.
pub fn panoptic_to_zup(pose: &CameraPose) -> CameraPose {
    CameraPose {
        matrix: mat_mul(&panoptic_alignment(), &pose.matrix),
    }
}

/// Switches the camera axes from the y-down/z-forward convention to y-up/z-backward.
pub fn opencv_to_opengl_camera(pose: &CameraPose) -> CameraPose {
    let flip = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    CameraPose {
        matrix: mat_mul(&pose.matrix, &flip),
    }
}

/// Scales the camera center by `scale` and keeps the orientation.
pub fn scale_camera(pose: &CameraPose, scale: f64) -> Result<CameraPose> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    let mut matrix = pose.matrix;
    for row in matrix.iter_mut().take(3) {
        row[3] *= scale;
    }
    Ok(CameraPose { matrix })
}
