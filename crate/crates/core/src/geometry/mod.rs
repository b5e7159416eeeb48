//! Camera models, rigid frame transforms, point clouds and 2D boxes.
//!
//! Pixel coordinates are continuous with the origin at the center of the
//! top-left pixel, so pixel `(i, j)` covers `[j - 0.5, j + 0.5] x [i - 0.5, i + 0.5]`.
//! Nothing here rasterizes; projection stays differentiable.

mod bbox;
mod camera;
mod cloud;
mod transform;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use bbox::{iou, tight_bbox, BBox2D};
pub use camera::{backproject, project, CameraIntrinsics, Projection2D};
pub use cloud::PointCloud;
pub use transform::{transform, RigidTransform};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Named coordinate frame a cloud or transform endpoint lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    /// Camera of the given view index (x right, y down, z forward).
    Camera(u16),
    /// Robot base; coincides with the world frame of generated scenes.
    Base,
    /// Gripper frame of a proposed grasp.
    Grasp,
    /// Body frame of a scene object.
    Object(u32),
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frame::Camera(i) => write!(f, "camera[{i}]"),
            Frame::Base => write!(f, "base"),
            Frame::Grasp => write!(f, "grasp"),
            Frame::Object(i) => write!(f, "object[{i}]"),
        }
    }
}
