use serde::{Deserialize, Serialize};

use super::{Frame, Vec3};
use crate::error::{Error, Result};

/// Ordered set of 3D points (meters) expressed in a named frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Vec3>,
    frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: Frame) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point cloud"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points, frame })
    }

    /// Builds a cloud from a row-major `K x 3` buffer.
    pub fn from_flat(values: &[f64], frame: Frame) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::Shape {
                op: "PointCloud::from_flat",
                left: vec![values.len()],
                right: vec![3],
            });
        }
        let points = values
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect();
        Self::new(points, frame)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        sum / self.points.len() as f64
    }

    /// Same points, relabelled frame. Only for frames known to coincide.
    pub fn relabel(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub(crate) fn from_parts_unchecked(points: Vec<Vec3>, frame: Frame) -> Self {
        debug_assert!(!points.is_empty());
        Self { points, frame }
    }
}
