//! Pinhole camera geometry: intrinsics from field of view, extrinsics from
//! pitch/yaw/roll, perspective projection, ray unprojection, the cosine
//! similarity between a pixel ray and a world point, and exact ground-plane
//! intersection.
//!
//! Frames:
//! * world / ego: right-handed, Z up, X forward, Y left.
//! * camera body: same axes as the world frame, rotated by the camera pose.
//! * camera optical: +Z along the optical axis, +X image right, +Y image down.
//!
//! [`ExtrinsicPose::rotation`] maps world coordinates into the camera body
//! frame; the fixed [`body_to_optical`] permutation then maps body axes to
//! optical axes, so a camera with zero angles looks along world +X.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Maps camera-body axes (X forward, Y left, Z up) onto optical axes
/// (X right, Y down, Z forward).
pub fn body_to_optical() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

/// Zero-skew pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 || cx < 0.0 || cy < 0.0 {
            return Err(GeometryError::InvalidArgument(format!(
                "intrinsics require fx, fy > 0 and cx, cy >= 0 (got {fx}, {fy}, {cx}, {cy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Focal lengths from the horizontal field of view, principal point at the
    /// image center.
    pub fn from_fov(width: u32, height: u32, fov_deg: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidArgument(format!(
                "image size must be positive (got {width}x{height})"
            )));
        }
        if !(fov_deg.is_finite() && fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::InvalidArgument(format!(
                "field of view must lie in (0, 180) degrees (got {fov_deg})"
            )));
        }
        let half_tan = (fov_deg.to_radians() / 2.0).tan();
        let (w, h) = (width as f64, height as f64);
        Self::new(w / (2.0 * half_tan), h / (2.0 * half_tan), w / 2.0, h / 2.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Horizontal field of view implied by `fx` for an image `width` pixels wide.
    pub fn fov_x_deg(&self, width: u32) -> f64 {
        (2.0 * (width as f64 / (2.0 * self.fx)).atan()).to_degrees()
    }
}

/// Camera placement as configured on a rig: position in meters, angles in degrees.
///
/// Positive pitch raises the optical axis, positive yaw turns it to the left
/// (counter-clockwise seen from above), roll turns about the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
}

impl CameraPose {
    pub fn new(x: f64, y: f64, z: f64, pitch_deg: f64, yaw_deg: f64, roll_deg: f64) -> Self {
        Self { x, y, z, pitch_deg, yaw_deg, roll_deg }
    }

    /// Re-expresses a pose given relative to a planar frame (ego vehicle) in
    /// the frame that contains it. `heading` is in radians.
    pub fn compose_planar(&self, origin_x: f64, origin_y: f64, heading: f64) -> Self {
        let (s, c) = heading.sin_cos();
        Self {
            x: origin_x + c * self.x - s * self.y,
            y: origin_y + s * self.x + c * self.y,
            z: self.z,
            pitch_deg: self.pitch_deg,
            yaw_deg: self.yaw_deg + heading.to_degrees(),
            roll_deg: self.roll_deg,
        }
    }
}

/// World-to-camera-body rotation plus camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl ExtrinsicPose {
    /// Body-to-world rotation is `Rz(yaw) * Ry(-pitch) * Rx(roll)`; the stored
    /// rotation is its transpose.
    pub fn from_pose(pose: &CameraPose) -> Result<Self> {
        let vals = [pose.x, pose.y, pose.z, pose.pitch_deg, pose.yaw_deg, pose.roll_deg];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidArgument(format!(
                "pose contains non-finite values: {pose:?}"
            )));
        }
        let body_to_world = Rotation3::from_euler_angles(
            pose.roll_deg.to_radians(),
            -pose.pitch_deg.to_radians(),
            pose.yaw_deg.to_radians(),
        );
        Ok(Self {
            rotation: body_to_world.inverse().into_inner(),
            translation: Vec3::new(pose.x, pose.y, pose.z),
        })
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidArgument(format!(
                "rotation is not proper orthonormal (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Full world-to-optical rigid transform as a homogeneous 4x4 matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let r = body_to_optical() * self.rotation;
        let t = -(r * self.translation);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }
}

/// Pixel coordinates; `(u, v)` with u to the right and v down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(&self) -> Vec3 {
        Vec3::new(self.u, self.v, 1.0)
    }
}

/// One calibrated pinhole view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub extrinsics: ExtrinsicPose,
}

impl CameraModel {
    pub fn new(name: impl Into<String>, width: u32, height: u32, fov_deg: f64, pose: CameraPose) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            width,
            height,
            fov_deg,
            pose,
            intrinsics: Intrinsics::from_fov(width, height, fov_deg)?,
            extrinsics: ExtrinsicPose::from_pose(&pose)?,
        })
    }

    /// The same camera mounted on a vehicle at `(x, y)` facing `heading` radians.
    pub fn placed_at(&self, x: f64, y: f64, heading: f64) -> Self {
        let pose = self.pose.compose_planar(x, y, heading);
        Self {
            pose,
            extrinsics: ExtrinsicPose::from_pose(&pose).expect("composed pose is finite"),
            ..self.clone()
        }
    }

    /// World point expressed in the optical frame.
    pub fn to_camera_frame(&self, p: &Vec3) -> Vec3 {
        body_to_optical() * (self.extrinsics.rotation * (p - self.extrinsics.translation))
    }

    /// Optical-frame point expressed in the world frame.
    pub fn from_camera_frame(&self, c: &Vec3) -> Vec3 {
        self.extrinsics.rotation.transpose() * (body_to_optical().transpose() * c) + self.extrinsics.translation
    }

    /// Camera center in the world frame.
    pub fn center(&self) -> Vec3 {
        self.extrinsics.translation
    }

    pub fn contains(&self, q: &ImagePoint) -> bool {
        q.u >= 0.0 && q.v >= 0.0 && q.u < self.width as f64 && q.v < self.height as f64
    }
}

/// Perspective projection `K R (p - t)` followed by dehomogenization.
pub fn project(p: &Vec3, cam: &CameraModel) -> Result<ImagePoint> {
    let x = cam.intrinsics.matrix() * cam.to_camera_frame(p);
    if !(x.z > 0.0) {
        return Err(GeometryError::BehindCamera { depth: x.z });
    }
    let q = ImagePoint::new(x.x / x.z, x.y / x.z);
    if !(q.u.is_finite() && q.v.is_finite()) {
        return Err(GeometryError::InvalidArgument("projection is not finite".into()));
    }
    Ok(q)
}

/// World-frame ray direction through a homogeneous image point. Not normalized.
pub fn unproject_homogeneous(x: &Vec3, cam: &CameraModel) -> Vec3 {
    cam.extrinsics.rotation.transpose() * (body_to_optical().transpose() * (cam.intrinsics.inverse_matrix() * x))
}

/// World-frame ray direction through pixel `q`. Not normalized.
pub fn unproject_direction(q: &ImagePoint, cam: &CameraModel) -> Vec3 {
    unproject_homogeneous(&q.homogeneous(), cam)
}

/// Cosine between the ray through `q` and the direction from the camera center to `p`.
pub fn geometric_similarity(q: &ImagePoint, p: &Vec3, cam: &CameraModel) -> Result<f64> {
    geometric_similarity_homogeneous(&q.homogeneous(), p, cam)
}

pub fn geometric_similarity_homogeneous(x: &Vec3, p: &Vec3, cam: &CameraModel) -> Result<f64> {
    let ray = unproject_homogeneous(x, cam);
    let to_point = p - cam.center();
    let (nr, np) = (ray.norm(), to_point.norm());
    if !(nr > 0.0) {
        return Err(GeometryError::Degenerate("unprojected ray has zero norm"));
    }
    if !(np > 0.0) {
        return Err(GeometryError::Degenerate("point coincides with the camera center"));
    }
    Ok((ray.dot(&to_point) / (nr * np)).clamp(-1.0, 1.0))
}

/// Intersection of the ray through `q` with the ground plane `z = 0`, if the
/// ray reaches it in front of the camera.
pub fn ray_ground_intersection(q: &ImagePoint, cam: &CameraModel) -> Option<Vec3> {
    let d = unproject_direction(q, cam);
    let t = cam.center();
    if !(d.z < 0.0) {
        return None;
    }
    let s = -t.z / d.z;
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    let mut hit = t + d * s;
    hit.z = 0.0;
    Some(hit)
}

/// Calibration record as stored next to every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    /// `[x, y, z]` in meters.
    pub position: [f64; 3],
    /// `[pitch, yaw, roll]` in degrees.
    pub rotation: [f64; 3],
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<[[f64; 3]; 3]>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<[[f64; 4]; 4]>,
}

impl From<&CameraModel> for CameraRecord {
    fn from(cam: &CameraModel) -> Self {
        let k = cam.intrinsics.matrix();
        let e = cam.extrinsics.matrix();
        Self {
            name: cam.name.clone(),
            width: cam.width,
            height: cam.height,
            fov_deg: cam.fov_deg,
            position: [cam.pose.x, cam.pose.y, cam.pose.z],
            rotation: [cam.pose.pitch_deg, cam.pose.yaw_deg, cam.pose.roll_deg],
            k: Some(std::array::from_fn(|r| std::array::from_fn(|c| k[(r, c)]))),
            e: Some(std::array::from_fn(|r| std::array::from_fn(|c| e[(r, c)]))),
        }
    }
}

impl CameraRecord {
    /// Rebuilds the camera from its configuration parameters. Stored matrices
    /// are ignored; use [`CameraRecord::check_matrices`] to validate them.
    pub fn to_camera(&self) -> Result<CameraModel> {
        let [x, y, z] = self.position;
        let [pitch, yaw, roll] = self.rotation;
        CameraModel::new(self.name.clone(), self.width, self.height, self.fov_deg, CameraPose::new(x, y, z, pitch, yaw, roll))
    }

    /// Largest absolute deviation between stored matrices and the ones
    /// recomputed from the configuration parameters (0 when none are stored).
    pub fn matrix_deviation(&self) -> Result<f64> {
        let cam = self.to_camera()?;
        let mut worst: f64 = 0.0;
        if let Some(k) = &self.k {
            let kk = cam.intrinsics.matrix();
            for (r, row) in k.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    worst = worst.max((v - kk[(r, c)]).abs());
                }
            }
        }
        if let Some(e) = &self.e {
            let ee = cam.extrinsics.matrix();
            for (r, row) in e.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    worst = worst.max((v - ee[(r, c)]).abs());
                }
            }
        }
        Ok(worst)
    }

    pub fn check_matrices(&self, tol: f64) -> Result<CameraModel> {
        let dev = self.matrix_deviation()?;
        if !(dev <= tol) {
            return Err(GeometryError::InvalidArgument(format!(
                "camera '{}': stored calibration deviates from recomputed by {dev:.6} (tolerance {tol})",
                self.name
            )));
        }
        self.to_camera()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: u32, h: u32, fov: f64, pose: CameraPose) -> CameraModel {
        CameraModel::new("test", w, h, fov, pose).unwrap()
    }

    #[test]
    fn intrinsics_square_ninety_degrees() {
        let k = Intrinsics::from_fov(400, 400, 90.0).unwrap();
        assert!((k.fx - 200.0).abs() < 1e-12 && (k.fy - 200.0).abs() < 1e-12);
        assert_eq!((k.cx, k.cy), (200.0, 200.0));
    }

    #[test]
    fn intrinsics_rectangular() {
        let k = Intrinsics::from_fov(800, 600, 90.0).unwrap();
        assert!((k.fx - 400.0).abs() < 1e-12);
        assert!((k.fy - 300.0).abs() < 1e-12);
        assert_eq!((k.cx, k.cy), (400.0, 300.0));
        let m = k.matrix();
        assert_eq!((m[(2, 2)], m[(0, 1)], m[(1, 0)], m[(2, 0)], m[(2, 1)]), (1.0, 0.0, 0.0, 0.0, 0.0));
        assert!((m * k.inverse_matrix() - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn intrinsics_reject_degenerate_fov() {
        for fov in [0.0, 180.0, -3.0, f64::NAN] {
            assert!(matches!(Intrinsics::from_fov(400, 400, fov), Err(GeometryError::InvalidArgument(_))));
        }
        assert!(Intrinsics::from_fov(0, 400, 90.0).is_err());
    }

    #[test]
    fn identity_and_translation_poses() {
        let e = ExtrinsicPose::from_pose(&CameraPose::default()).unwrap();
        assert!((e.rotation - Matrix3::identity()).abs().max() < 1e-15);
        let e = ExtrinsicPose::from_pose(&CameraPose::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((e.rotation - Matrix3::identity()).abs().max() < 1e-15);
        assert_eq!(e.translation, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn yaw_half_turn_negates_forward() {
        let e = ExtrinsicPose::from_pose(&CameraPose::new(0.0, 0.0, 0.0, 0.0, 180.0, 0.0)).unwrap();
        // elementary Rz(pi), transposed
        let rz = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((e.rotation - rz.transpose()).abs().max() < 1e-12);
        assert!((e.rotation * Vec3::x() + Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn non_finite_pose_rejected() {
        let p = CameraPose::new(0.0, f64::INFINITY, 0.0, 0.0, 0.0, 0.0);
        assert!(ExtrinsicPose::from_pose(&p).is_err());
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let c = cam(400, 400, 90.0, CameraPose::default());
        let q = project(&Vec3::new(7.0, 0.0, 0.0), &c).unwrap();
        assert!((q.u - 200.0).abs() < 1e-12 && (q.v - 200.0).abs() < 1e-12);
    }

    #[test]
    fn camera_frame_point_projects_by_hand() {
        let c = cam(400, 400, 90.0, CameraPose::default());
        let p = c.from_camera_frame(&Vec3::new(1.0, 0.0, 5.0));
        let q = project(&p, &c).unwrap();
        assert!((q.u - 240.0).abs() < 1e-9 && (q.v - 200.0).abs() < 1e-9);
    }

    #[test]
    fn zero_depth_is_behind_camera() {
        let c = cam(400, 400, 90.0, CameraPose::default());
        let err = project(&Vec3::new(0.0, 1.0, 0.0), &c).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
    }

    #[test]
    fn unprojection_by_hand() {
        let c = cam(400, 400, 90.0, CameraPose::default());
        let d = unproject_direction(&ImagePoint::new(200.0, 200.0), &c);
        assert!((d.normalize() - Vec3::x()).norm() < 1e-15);
        let d = unproject_direction(&ImagePoint::new(240.0, 200.0), &c);
        let in_cam = body_to_optical() * (c.extrinsics.rotation * d);
        assert!((in_cam - Vec3::new(0.2, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn similarity_extremes() {
        let c = cam(400, 400, 90.0, CameraPose::new(1.0, -2.0, 1.5, -10.0, 30.0, 5.0));
        let p = c.from_camera_frame(&Vec3::new(0.3, -0.2, 4.0));
        let q = project(&p, &c).unwrap();
        assert!((geometric_similarity(&q, &p, &c).unwrap() - 1.0).abs() < 1e-9);
        // reflection through the camera center
        let behind = c.center() * 2.0 - p;
        assert!((geometric_similarity(&q, &behind, &c).unwrap() + 1.0).abs() < 1e-9);
        let ray = unproject_direction(&q, &c);
        let ortho = c.center() + ray.cross(&Vec3::z()).normalize();
        assert!(geometric_similarity(&q, &ortho, &c).unwrap().abs() < 1e-9);
        assert!(matches!(
            geometric_similarity(&q, &c.center(), &c),
            Err(GeometryError::Degenerate(_))
        ));
        assert!(geometric_similarity_homogeneous(&Vec3::zeros(), &p, &c).is_err());
    }

    #[test]
    fn ground_hit_at_forty_five_degrees() {
        let c = cam(400, 400, 90.0, CameraPose::new(0.0, 0.0, 2.0, -45.0, 0.0, 0.0));
        let hit = ray_ground_intersection(&ImagePoint::new(200.0, 200.0), &c).unwrap();
        assert!((hit - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn horizon_ray_misses_ground() {
        let c = cam(400, 400, 90.0, CameraPose::new(0.0, 0.0, 2.0, 0.0, 0.0, 0.0));
        assert!(ray_ground_intersection(&ImagePoint::new(200.0, 200.0), &c).is_none());
        assert!(ray_ground_intersection(&ImagePoint::new(200.0, 10.0), &c).is_none());
        assert!(ray_ground_intersection(&ImagePoint::new(200.0, 390.0), &c).is_some());
    }

    #[test]
    fn extrinsic_matrix_matches_camera_frame() {
        let c = cam(128, 96, 70.0, CameraPose::new(0.5, 0.2, 1.8, -5.0, 55.0, 2.0));
        let p = Vec3::new(4.0, 3.0, 0.0);
        let e = c.extrinsics.matrix();
        let h = e * p.push(1.0);
        assert!((h.xyz() - c.to_camera_frame(&p)).norm() < 1e-12);
        assert_eq!(h.w, 1.0);
    }

    #[test]
    fn record_round_trip_and_check() {
        let c = cam(800, 600, 90.0, CameraPose::new(0.5, 0.2, 1.8, -5.0, 55.0, 0.0));
        let rec = CameraRecord::from(&c);
        let json = serde_json::to_string(&rec).unwrap();
        let back: CameraRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_camera().unwrap(), c);
        assert_eq!(back.matrix_deviation().unwrap(), 0.0);
        let mut bad = back.clone();
        bad.k.as_mut().unwrap()[0][0] = 500.0;
        assert!((bad.matrix_deviation().unwrap() - 100.0).abs() < 1e-9);
        assert!(bad.check_matrices(1e-3).is_err());
    }

    #[test]
    fn planar_composition_matches_matrix_composition() {
        let mount = CameraPose::new(1.2, 0.4, 1.8, -5.0, 55.0, 0.0);
        let placed = cam(128, 128, 90.0, mount).placed_at(10.0, -3.0, 0.7);
        let mounted = cam(128, 128, 90.0, mount);
        let ego_to_world = Rotation3::from_axis_angle(&Vec3::z_axis(), 0.7);
        let p_ego = Vec3::new(5.0, 1.0, 0.0);
        let p_world = ego_to_world * p_ego + Vec3::new(10.0, -3.0, 0.0);
        assert!((placed.to_camera_frame(&p_world) - mounted.to_camera_frame(&p_ego)).norm() < 1e-12);
    }
}
