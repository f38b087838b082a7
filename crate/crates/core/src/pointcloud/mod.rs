//! Point clouds, rigid poses, KITTI file formats and synthetic scenes.

mod kitti;
mod pose;
mod synth;

pub use kitti::{
    format_pose_line, format_pose_sidecar, parse_pose_line, read_kitti_bin, read_pose_file,
    write_kitti_bin, LoadStats,
};
pub use pose::{
    matrix_to_quat, normalize_quat, quat_angle, quat_conj, quat_mul, quat_norm, quat_rotate,
    quat_to_matrix, Mat3, Pose, Quat, Vec3,
};
pub use synth::{synth_pair, synth_scene, synth_scene_with_fov, Scene, ScenePair, SensorFov};

/// Unordered set of 3D points (meters) with optional per-point intensity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub intensity: Option<Vec<f32>>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            intensity: None,
            frame_id: String::new(),
        }
    }

    pub fn with_frame_id(mut self, id: impl Into<String>) -> Self {
        self.frame_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Maps each point to `R(q) p + t`.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|&p| pose.transform_point(p))
                .collect(),
            intensity: self.intensity.clone(),
            frame_id: self.frame_id.clone(),
        }
    }
}

pub fn apply_rigid_transform(pc: &PointCloud, pose: &Pose) -> PointCloud {
    pc.transformed(pose)
}
