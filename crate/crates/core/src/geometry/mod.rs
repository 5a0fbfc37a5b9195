//! Cameras, poses, rays, image buffers, and projection.
//!
//! Conventions used throughout the crate:
//! - Poses are world-to-camera: `x_cam = R * x_world + t`. Camera axes are
//!   +x right, +y down, +z forward (COLMAP convention).
//! - Integer pixel `(u, v)` covers the unit square whose center is at
//!   continuous image coordinates `(u + 0.5, v + 0.5)`; projection therefore
//!   maps a world point to `u = fx * x/z + cx - 0.5` so that a returned `u`
//!   can be compared directly against pixel indices.
//! - Depth maps store camera-space z (not distance along the viewing ray).
//! - Invalid pixels in float maps are encoded as all-NaN.

pub mod colmap;
pub mod pfm;
pub mod ply;

pub use colmap::{read_poses, write_poses, ViewPose};
pub use pfm::{read_pfm, write_pfm};
pub use ply::{read_pointcloud_ply, write_mesh_ply, write_pointcloud_ply};

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera intrinsics with zero skew and no distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "camera resolution must be positive, got {width}x{height}"
            )));
        }
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite, got fx={fx} fy={fy}"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "principal point must be finite, got cx={cx} cy={cy}"
            )));
        }
        Ok(Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        })
    }

    /// Symmetric intrinsics with the principal point at the image center.
    pub fn centered(width: usize, height: usize, focal: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
        )
    }

    /// True if pixel coordinates `(u, v)` fall inside the image. The valid
    /// range is `[-0.5, dim - 0.5]` because coordinates address pixel centers.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u <= self.width as f64 - 0.5 && v >= -0.5 && v <= self.height as f64 - 0.5
    }
}

/// Rigid world-to-camera transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Maximum deviation from orthonormality accepted by [`Pose::new`].
const ROTATION_TOL: f64 = 1e-9;

impl Pose {
    /// Builds a pose, validating that `rotation` is a proper rotation
    /// (orthonormal with determinant +1, within `1e-9`).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if defect > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (defect {defect:.3e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation determinant is {} (expected +1)",
                rotation.determinant()
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose from a unit quaternion (w, x, y, z) and translation, both in the
    /// world-to-camera direction. The quaternion is normalized before use;
    /// callers validate how far from unit it was allowed to be.
    pub fn from_quaternion(qw: f64, qx: f64, qy: f64, qz: f64, translation: Vector3<f64>) -> Result<Self> {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        if q.norm() < 1e-12 {
            return Err(Error::InvalidInput("zero quaternion".into()));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Pose::new(uq.to_rotation_matrix().into_inner(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World-to-camera rotation as a unit quaternion (w, x, y, z).
    pub fn quaternion(&self) -> [f64; 4] {
        let uq = UnitQuaternion::from_matrix(&self.rotation);
        let q = uq.quaternion();
        // Canonicalize sign so round-trips are stable.
        if q.w < 0.0 {
            [-q.w, -q.i, -q.j, -q.k]
        } else {
            [q.w, q.i, q.j, q.k]
        }
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Rotates a direction from camera to world frame (no translation).
    pub fn direction_to_world(&self, d_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * d_cam
    }

    /// Rotates a direction from world to camera frame.
    pub fn direction_to_camera(&self, d_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d_world
    }
}

/// A ray with unit direction and a sampling interval `[t_near, t_far]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Unit<Vector3<f64>>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        if !(t_near.is_finite() && t_far.is_finite()) || t_near < 0.0 || t_near >= t_far {
            return Err(Error::InvalidInput(format!(
                "ray interval must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        let norm = direction.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidInput("ray direction is degenerate".into()));
        }
        Ok(Self {
            origin,
            direction: Unit::new_normalize(direction),
            t_near,
            t_far,
        })
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction.into_inner() * t
    }
}

/// Row-major float image with `channels` interleaved samples per pixel.
/// Invalid pixels are encoded as all-NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        assert!((1..=4).contains(&channels), "1..=4 channels supported");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn index(&self, u: usize, v: usize) -> usize {
        debug_assert!(u < self.width && v < self.height);
        (v * self.width + u) * self.channels
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let i = self.index(u, v);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let i = self.index(u, v);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Scalar accessor for single-channel maps.
    #[inline]
    pub fn value(&self, u: usize, v: usize) -> f32 {
        self.pixel(u, v)[0]
    }

    /// A pixel is valid iff none of its channels are NaN.
    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.pixel(u, v).iter().all(|x| !x.is_nan())
    }

    /// Marks a pixel invalid by writing NaN to every channel.
    pub fn invalidate(&mut self, u: usize, v: usize) {
        self.pixel_mut(u, v).fill(f32::NAN);
    }

    pub fn valid_count(&self) -> usize {
        (0..self.height)
            .flat_map(|v| (0..self.width).map(move |u| (u, v)))
            .filter(|&(u, v)| self.is_valid(u, v))
            .count()
    }
}

/// Builds the world-space viewing ray through pixel `(u, v)`.
///
/// `u` and `v` address pixel centers (integer `u` means the center of column
/// `u`) and must lie inside the image. The returned direction is normalized,
/// so `t` along the ray is Euclidean distance, not camera-space depth.
pub fn pixel_to_ray(
    cam: &CameraIntrinsics,
    pose: &Pose,
    u: f64,
    v: f64,
    t_near: f64,
    t_far: f64,
) -> Result<Ray> {
    if !cam.contains(u, v) {
        return Err(Error::InvalidInput(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    let dir_cam = Vector3::new(
        (u + 0.5 - cam.cx) / cam.fx,
        (v + 0.5 - cam.cy) / cam.fy,
        1.0,
    );
    let origin = pose.camera_center();
    let dir_world = pose.direction_to_world(&dir_cam);
    Ray::new(origin, dir_world, t_near, t_far)
}

/// Projects a world point into a camera, returning `(u, v, depth)` where
/// `depth` is camera-space z. Points at non-positive depth yield
/// [`Error::BehindCamera`]; coordinates outside the image are returned as-is
/// (callers decide whether off-image projections matter).
pub fn project(cam: &CameraIntrinsics, pose: &Pose, point: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    let p = pose.world_to_camera(point);
    if p.z <= 0.0 {
        return Err(Error::BehindCamera(p.z));
    }
    let u = cam.fx * p.x / p.z + cam.cx - 0.5;
    let v = cam.fy * p.y / p.z + cam.cy - 0.5;
    Ok((u, v, p.z))
}

/// Lifts pixel `(u, v)` at camera-space depth `z` back to a world point.
pub fn backproject(
    cam: &CameraIntrinsics,
    pose: &Pose,
    u: f64,
    v: f64,
    depth: f64,
) -> Result<Vector3<f64>> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    let p_cam = Vector3::new(
        (u + 0.5 - cam.cx) / cam.fx * depth,
        (v + 0.5 - cam.cy) / cam.fy * depth,
        depth,
    );
    Ok(pose.camera_to_world(&p_cam))
}

/// Factor converting camera-space depth at pixel `(u, v)` into distance along
/// the normalized viewing ray: `t = z * depth_to_ray_scale(cam, u, v)`.
pub fn depth_to_ray_scale(cam: &CameraIntrinsics, u: f64, v: f64) -> f64 {
    let x = (u + 0.5 - cam.cx) / cam.fx;
    let y = (v + 0.5 - cam.cy) / cam.fy;
    (x * x + y * y + 1.0).sqrt()
}

/// Right-handed look-at pose: camera at `eye` looking toward `target`, with
/// `up` fixing the roll. Camera axes are +x right, +y down, +z forward.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Pose> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(Error::InvalidInput("look_at: eye coincides with target".into()));
    }
    let f = forward.normalize();
    let right = f.cross(up);
    if right.norm() < 1e-9 {
        return Err(Error::InvalidInput("look_at: view direction parallel to up".into()));
    }
    let r = right.normalize();
    let d = f.cross(&r); // +y is down; (r, d, f) is right-handed
    let rotation = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    let translation = -(rotation * eye);
    Pose::new(rotation, translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100, 100, 100.0, 100.0, 50.0, 50.0).unwrap()
    }

    #[test]
    fn project_reference_point() {
        // fx=fy=100, cx=cy=50: the point (1, 0, 2) maps to u = 100*0.5 + 50 - 0.5.
        let cam = test_cam();
        let (u, v, depth) = project(&cam, &Pose::identity(), &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(u, 99.5, epsilon = 1e-12);
        assert_relative_eq!(v, 49.5, epsilon = 1e-12);
        assert_relative_eq!(depth, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pixel_ray_direction_reference() {
        // Pixel (99.5, 49.5) looks along camera direction proportional to (0.5, 0, 1).
        let cam = test_cam();
        let ray = pixel_to_ray(&cam, &Pose::identity(), 99.5, 49.5, 0.1, 10.0).unwrap();
        let expected = Vector3::new(0.5, 0.0, 1.0).normalize();
        assert_relative_eq!(ray.direction.into_inner(), expected, epsilon = 1e-12);
        assert_relative_eq!(ray.origin, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn project_backproject_roundtrip() {
        let cam = test_cam();
        let pose = look_at(
            &Vector3::new(1.0, -2.0, 0.5),
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let p = Vector3::new(0.1, 0.2, -0.3);
        let (u, v, depth) = project(&cam, &pose, &p).unwrap();
        let q = backproject(&cam, &pose, u, v, depth).unwrap();
        assert_relative_eq!(p, q, epsilon = 1e-10);
    }

    #[test]
    fn pixel_to_ray_then_project_is_identity() {
        let cam = test_cam();
        let pose = look_at(
            &Vector3::new(2.0, 0.3, 1.0),
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        for &(u, v) in &[(0.0, 0.0), (12.25, 80.5), (99.0, 3.75), (49.5, 49.5)] {
            let ray = pixel_to_ray(&cam, &pose, u, v, 0.1, 10.0).unwrap();
            let p = ray.point_at(2.34);
            let (pu, pv, depth) = project(&cam, &pose, &p).unwrap();
            assert_relative_eq!(pu, u, epsilon = 1e-9);
            assert_relative_eq!(pv, v, epsilon = 1e-9);
            // Projective depth times the ray-scale factor recovers ray distance.
            assert_relative_eq!(depth * depth_to_ray_scale(&cam, u, v), 2.34, epsilon = 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_signalled() {
        let cam = test_cam();
        let err = project(&cam, &Pose::identity(), &Vector3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, Error::BehindCamera(_)));
    }

    #[test]
    fn camera_center_matches_inverse_transform() {
        let pose = look_at(
            &Vector3::new(1.5, -0.5, 2.0),
            &Vector3::new(0.0, 1.0, 0.0),
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        assert_relative_eq!(
            pose.camera_center(),
            Vector3::new(1.5, -0.5, 2.0),
            epsilon = 1e-12
        );
        // world_to_camera of the center is the origin.
        assert_relative_eq!(
            pose.world_to_camera(&pose.camera_center()),
            Vector3::zeros(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn look_at_faces_target() {
        let eye = Vector3::new(3.0, 1.0, -2.0);
        let target = Vector3::new(0.0, 0.0, 0.5);
        let pose = look_at(&eye, &target, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let cam_target = pose.world_to_camera(&target);
        // Target sits on the +z (forward) axis.
        assert_relative_eq!(cam_target.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(cam_target.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(cam_target.z, (target - eye).norm(), epsilon = 1e-12);
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.1);
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        // Reflection: orthonormal but determinant -1.
        let refl = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(refl, Vector3::zeros()).is_err());
    }

    #[test]
    fn ray_rejects_bad_interval() {
        assert!(Ray::new(Vector3::zeros(), Vector3::z(), 1.0, 1.0).is_err());
        assert!(Ray::new(Vector3::zeros(), Vector3::z(), -0.1, 1.0).is_err());
        assert!(Ray::new(Vector3::zeros(), Vector3::zeros(), 0.1, 1.0).is_err());
    }

    #[test]
    fn image_buffer_validity() {
        let mut img = ImageBuffer::new(4, 3, 2);
        assert!(img.is_valid(1, 2));
        img.invalidate(1, 2);
        assert!(!img.is_valid(1, 2));
        assert!(img.pixel(1, 2).iter().all(|x| x.is_nan()));
        assert_eq!(img.valid_count(), 11);
    }

    #[test]
    fn pixel_bounds_follow_center_convention() {
        let cam = test_cam();
        assert!(cam.contains(-0.5, 0.0));
        assert!(cam.contains(99.5, 99.5));
        assert!(!cam.contains(99.51, 0.0));
        assert!(pixel_to_ray(&cam, &Pose::identity(), 100.0, 0.0, 0.1, 1.0).is_err());
    }
}
