use serde::{Deserialize, Serialize};

use super::{Frame, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Pinhole intrinsics stored as scalars so crops can rewrite single fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Intrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Intrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Intrinsics("image size must be non-zero".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(Error::Intrinsics(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixel of a camera-frame point. Caller guarantees `p.z > 0`.
    #[inline]
    pub fn project_point(&self, p: &Vec3) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }

    #[inline]
    pub fn backproject_pixel(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Unit-depth ray through a pixel.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Continuous pixel coordinates of a projected cloud, in cloud order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points2d: Vec<[f64; 2]>,
}

impl Projection2D {
    pub fn len(&self) -> usize {
        self.points2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points2d.is_empty()
    }
}

/// Pinhole projection `u = fx x / z + cx`, `v = fy y / z + cy`.
pub fn project(cloud: &PointCloud, intrinsics: &CameraIntrinsics) -> Result<Projection2D> {
    if !matches!(cloud.frame(), Frame::Camera(_)) {
        return Err(Error::FrameMismatch {
            expected: Frame::Camera(0),
            found: cloud.frame(),
        });
    }
    let points2d = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p.z <= 0.0 {
                Err(Error::BehindCamera { index, z: p.z })
            } else {
                Ok(intrinsics.project_point(p))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Projection2D { points2d })
}

/// Inverse of [`project`] for pixels with known depth.
pub fn backproject(
    depth_pixels: &[[f64; 3]],
    intrinsics: &CameraIntrinsics,
    frame: Frame,
) -> Result<PointCloud> {
    let points = depth_pixels
        .iter()
        .enumerate()
        .map(|(index, &[u, v, z])| {
            if z > 0.0 && z.is_finite() {
                Ok(intrinsics.backproject_pixel(u, v, z))
            } else {
                Err(Error::InvalidDepth { index, z })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(points, frame)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap()
    }

    fn hundred() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn cam(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points, Frame::Camera(0)).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let proj = project(&cam(vec![Vec3::new(0.0, 0.0, 1.0)]), &unit()).unwrap();
        assert_eq!(proj.points2d, vec![[0.0, 0.0]]);
    }

    #[test]
    fn hand_computed_projection() {
        let proj = project(&cam(vec![Vec3::new(0.1, 0.2, 1.0)]), &hundred()).unwrap();
        assert!((proj.points2d[0][0] - 60.0).abs() < 1e-12);
        assert!((proj.points2d[0][1] - 70.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_names_index() {
        let cloud = cam(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)]);
        match project(&cloud, &hundred()) {
            Err(Error::BehindCamera { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn projection_requires_camera_frame() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 1.0)], Frame::Base).unwrap();
        assert!(matches!(
            project(&cloud, &unit()),
            Err(Error::FrameMismatch { .. })
        ));
    }

    #[test]
    fn backproject_examples() {
        let c = backproject(&[[0.0, 0.0, 2.0]], &unit(), Frame::Camera(0)).unwrap();
        assert_eq!(c.points()[0], Vec3::new(0.0, 0.0, 2.0));
        let c = backproject(&[[60.0, 70.0, 1.0]], &hundred(), Frame::Camera(0)).unwrap();
        assert!((c.points()[0] - Vec3::new(0.1, 0.2, 1.0)).norm() < 1e-12);
        assert!(matches!(
            backproject(&[[1.0, 1.0, 0.0]], &unit(), Frame::Camera(0)),
            Err(Error::InvalidDepth { index: 0, .. })
        ));
    }

    #[test]
    fn round_trip_on_random_pixels() {
        let intr = CameraIntrinsics::new(190.0, 185.0, 63.5, 47.5, 128, 96).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.random_range(0.0..128.0),
                    rng.random_range(0.0..96.0),
                    rng.random_range(0.05..5.0),
                ]
            })
            .collect();
        let cloud = backproject(&pixels, &intr, Frame::Camera(2)).unwrap();
        let proj = project(&cloud, &intr).unwrap();
        for (p, q) in pixels.iter().zip(&proj.points2d) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
    }
}
