use serde::{Deserialize, Serialize};

use super::WorldError;
use crate::geometry::{CameraModel, CameraPose};

/// Canonical view order; the rear camera is always last.
pub const VIEW_NAMES: [&str; 4] = ["left", "center", "right", "rear"];

/// Camera rig parameters shared by all views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub mount_height: f64,
    pub pitch_deg: f64,
    /// Yaw of the side cameras; left is `+side_yaw_deg`, right `-side_yaw_deg`.
    pub side_yaw_deg: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self { n_views: 4, width: 128, height: 128, fov_deg: 90.0, mount_height: 1.8, pitch_deg: -5.0, side_yaw_deg: 55.0 }
    }
}

/// Cameras in the ego frame, in [`VIEW_NAMES`] order; three-view rigs omit the rear.
pub fn default_rig(spec: &RigSpec) -> Result<Vec<CameraModel>, WorldError> {
    if !(spec.n_views == 3 || spec.n_views == 4) {
        return Err(WorldError::InvalidArgument(format!("rig must have 3 or 4 views (got {})", spec.n_views)));
    }
    let h = spec.mount_height;
    let poses = [
        CameraPose::new(1.2, 0.5, h, spec.pitch_deg, spec.side_yaw_deg, 0.0),
        CameraPose::new(1.5, 0.0, h, spec.pitch_deg, 0.0, 0.0),
        CameraPose::new(1.2, -0.5, h, spec.pitch_deg, -spec.side_yaw_deg, 0.0),
        CameraPose::new(-1.5, 0.0, h, spec.pitch_deg, 180.0, 0.0),
    ];
    VIEW_NAMES
        .iter()
        .zip(poses)
        .take(spec.n_views)
        .map(|(name, pose)| Ok(CameraModel::new(*name, spec.width, spec.height, spec.fov_deg, pose)?))
        .collect()
}
