use serde::{Deserialize, Serialize};

use super::{Frame, Mat3, PointCloud, Vec3};
use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// `p_to = R p_from + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
    from: Frame,
    to: Frame,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3, from: Frame, to: Frame) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Transform("non-finite entry".into()));
        }
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if ortho > ORTHO_TOL {
            return Err(Error::Transform(format!(
                "rotation is not orthonormal (max |R^T R - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Transform(format!("det(R) = {det}, expected +1")));
        }
        Ok(Self {
            rotation,
            translation,
            from,
            to,
        })
    }

    pub fn identity(from: Frame, to: Frame) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            from,
            to,
        }
    }

    pub fn translation_only(t: Vec3, from: Frame, to: Frame) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
            from,
            to,
        }
    }

    /// Rotation by `yaw` about +z followed by a translation.
    pub fn from_yaw(yaw: f64, t: Vec3, from: Frame, to: Frame) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            rotation,
            translation: t,
            from,
            to,
        }
    }

    /// Camera pose looking from `eye` at `target`; maps camera coordinates
    /// (x right, y down, z forward) into `to`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, camera: Frame, to: Frame) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Transform("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Transform("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye, camera, to)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn from_frame(&self) -> Frame {
        self.from
    }

    pub fn to_frame(&self) -> Frame {
        self.to
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            translation: -(rt * self.translation),
            rotation: rt,
            from: self.to,
            to: self.from,
        }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Result<Self> {
        if first.to != self.from {
            return Err(Error::FrameMismatch {
                expected: self.from,
                found: first.to,
            });
        }
        Ok(Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
            from: first.from,
            to: self.to,
        })
    }

    /// Same motion between relabelled frames.
    pub fn with_frames(mut self, from: Frame, to: Frame) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    /// Row-major 3x4 `[R | t]`, used by the dataset format.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_rows(rows: &[f64; 12], from: Frame, to: Frame) -> Result<Self> {
        let rotation = Mat3::new(
            rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
        );
        Self::new(rotation, Vec3::new(rows[3], rows[7], rows[11]), from, to)
    }
}

/// Maps every point with `T`; the result lives in `T.to_frame()`.
pub fn transform(cloud: &PointCloud, t: &RigidTransform) -> Result<PointCloud> {
    if cloud.frame() != t.from_frame() {
        return Err(Error::FrameMismatch {
            expected: t.from_frame(),
            found: cloud.frame(),
        });
    }
    let points = cloud.points().iter().map(|p| t.apply(p)).collect();
    Ok(PointCloud::from_parts_unchecked(points, t.to_frame()))
}

impl PointCloud {
    pub fn transformed(&self, t: &RigidTransform) -> Result<PointCloud> {
        transform(self, t)
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Random proper rotation via QR of a gaussian-ish matrix.
    fn random_transform(rng: &mut ChaCha8Rng, from: Frame, to: Frame) -> RigidTransform {
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let qr = m.qr();
        let mut q: Mat3 = qr.q().fixed_view::<3, 3>(0, 0).into();
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        let t = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        RigidTransform::new(q, t, from, to).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, frame: Frame) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        PointCloud::new(pts, frame).unwrap()
    }

    #[test]
    fn identity_relabels() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)], Frame::Camera(0)).unwrap();
        let out = transform(&cloud, &RigidTransform::identity(Frame::Camera(0), Frame::Base)).unwrap();
        assert_eq!(out.points(), cloud.points());
        assert_eq!(out.frame(), Frame::Base);
    }

    #[test]
    fn pure_translation() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)], Frame::Base).unwrap();
        let t = RigidTransform::translation_only(Vec3::new(0.0, 0.0, 1.0), Frame::Base, Frame::Base);
        assert_eq!(transform(&cloud, &t).unwrap().points()[0], Vec3::new(1.0, 2.0, 4.0));
    }

    #[test]
    fn frame_mismatch_rejected() {
        let cloud = PointCloud::new(vec![Vec3::zeros()], Frame::Grasp).unwrap();
        let t = RigidTransform::identity(Frame::Base, Frame::Grasp);
        assert!(matches!(transform(&cloud, &t), Err(Error::FrameMismatch { .. })));
        assert!(t.compose(&t).is_err());
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t1 = random_transform(&mut rng, Frame::Camera(0), Frame::Base);
            let t2 = random_transform(&mut rng, Frame::Base, Frame::Grasp);
            let cloud = random_cloud(&mut rng, 50, Frame::Camera(0));
            let once = transform(&cloud, &t2.compose(&t1).unwrap()).unwrap();
            let twice = transform(&transform(&cloud, &t1).unwrap(), &t2).unwrap();
            assert_eq!(once.frame(), Frame::Grasp);
            for (a, b) in once.points().iter().zip(twice.points()) {
                assert!((a - b).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let a = random_transform(&mut rng, Frame::Camera(1), Frame::Base);
            let b = random_transform(&mut rng, Frame::Base, Frame::Grasp);
            let c = random_transform(&mut rng, Frame::Grasp, Frame::Object(3));
            let id = a.compose(&a.inverse()).unwrap();
            assert!((id.rotation() - Mat3::identity()).amax() < 1e-12);
            assert!(id.translation().amax() < 1e-12);
            let left = c.compose(&b).unwrap().compose(&a).unwrap();
            let right = c.compose(&b.compose(&a).unwrap()).unwrap();
            assert!((left.rotation() - right.rotation()).amax() < 1e-12);
            assert!((left.translation() - right.translation()).amax() < 1e-12);
        }
    }

    #[test]
    fn rejects_reflections_and_shear() {
        let reflect = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(reflect, Vec3::zeros(), Frame::Base, Frame::Base).is_err());
        let shear = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(shear, Vec3::zeros(), Frame::Base, Frame::Base).is_err());
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vec3::new(0.2, -0.4, 1.0);
        let target = Vec3::new(0.6, 0.0, 0.4);
        let pose = RigidTransform::look_at(eye, target, Vec3::z(), Frame::Camera(0), Frame::Base)
            .unwrap();
        let in_cam = pose.inverse().apply(&target);
        assert!(in_cam.x.abs() < 1e-12 && in_cam.y.abs() < 1e-12 && in_cam.z > 0.0);
        // image "down" has a negative world-z component
        assert!(pose.apply_vector(&Vec3::y()).z < 0.0);
    }

    #[test]
    fn rows_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_transform(&mut rng, Frame::Base, Frame::Camera(4));
        let back = RigidTransform::from_rows(&t.to_rows(), Frame::Base, Frame::Camera(4)).unwrap();
        assert_eq!(back, t);
    }
}
