use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud, RigidTransform, Vec3};

/// Top-down gripper pose: fingertip midpoint `p` in the base frame and yaw
/// `psi` about base z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspSample {
    pub p: [f64; 3],
    pub psi: f64,
}

impl GraspSample {
    pub fn new(p: [f64; 3], psi: f64) -> Result<Self> {
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&psi) {
            return Err(Error::config("grasp.psi", format!("yaw {psi} outside [-pi/2, pi/2]")));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(0));
        }
        Ok(Self { p, psi })
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.p[0], self.p[1], self.p[2])
    }

    /// Grasp frame to base frame.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.psi, self.position(), Frame::Grasp, Frame::Base)
    }

    /// The pose `dh` straight above, where the descent starts.
    pub fn pre_grasp(&self, dh: f64) -> GraspSample {
        GraspSample {
            p: [self.p[0], self.p[1], self.p[2] + dh],
            psi: self.psi,
        }
    }
}

/// Parallel-jaw gripper. In the grasp frame the jaws close along y, the
/// fingers hang from `z = finger_length` down to their tips at `z = 0`, and
/// the palm sits on top of the fingers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GripperModel {
    /// Opening between the inner finger planes.
    pub jaw_width: f64,
    pub finger_length: f64,
    pub finger_thickness: f64,
    /// Finger extent along grasp x.
    pub finger_width: f64,
    /// Height of the pre-grasp pose above the grasp pose.
    pub pre_grasp_height: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        Self {
            jaw_width: 0.08,
            finger_length: 0.05,
            finger_thickness: 0.01,
            finger_width: 0.02,
            pre_grasp_height: 0.10,
        }
    }
}

impl GripperModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gripper.jaw_width", self.jaw_width),
            ("gripper.finger_length", self.finger_length),
            ("gripper.finger_thickness", self.finger_thickness),
            ("gripper.finger_width", self.finger_width),
            ("gripper.pre_grasp_height", self.pre_grasp_height),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Seeded Fisher-Yates shuffle of the point order.
pub fn shuffle_points(points: &mut [Vec3], rng: &mut impl Rng) {
    points.shuffle(rng);
}

/// Expresses a camera-frame cloud relative to the gripper at `s`:
/// `P_s = (T_R^s)^-1 T_R^C P`, then shuffles the point order.
pub fn to_grasp_frame(
    cloud: &PointCloud,
    s: &GraspSample,
    camera_to_base: &RigidTransform,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    let mut pts = to_grasp_frame_ordered(cloud, s, camera_to_base)?.into_points();
    shuffle_points(&mut pts, rng);
    PointCloud::new(pts, Frame::Grasp)
}

/// [`to_grasp_frame`] without the shuffle.
pub fn to_grasp_frame_ordered(cloud: &PointCloud, s: &GraspSample, camera_to_base: &RigidTransform) -> Result<PointCloud> {
    if camera_to_base.from_frame() != cloud.frame() {
        return Err(Error::FrameMismatch {
            expected: camera_to_base.from_frame(),
            found: cloud.frame(),
        });
    }
    if camera_to_base.to_frame() != Frame::Base {
        return Err(Error::FrameMismatch {
            expected: Frame::Base,
            found: camera_to_base.to_frame(),
        });
    }
    let t = s.pose().inverse().compose(camera_to_base)?;
    cloud.transformed(&t)
}

/// Base-frame points relative to the gripper at `s`, in order.
pub fn base_to_grasp(points: &[Vec3], s: &GraspSample) -> Vec<Vec3> {
    let (c, sn) = (s.psi.cos(), s.psi.sin());
    points
        .iter()
        .map(|q| {
            let d = q - s.position();
            Vec3::new(c * d.x + sn * d.y, -sn * d.x + c * d.y, d.z)
        })
        .collect()
}

/// Mean of the points.
pub fn centroid(points: &[Vec3]) -> Result<Vec3> {
    if points.is_empty() {
        return Err(Error::EmptyInput("cloud"));
    }
    Ok(points.iter().sum::<Vec3>() / points.len() as f64)
}

/// Position noise around the cloud centroid (gaussian, clipped at three
/// standard deviations) and a uniform yaw.
pub fn heuristic_sample(cloud: &PointCloud, sigma: f64, rng: &mut impl Rng) -> Result<GraspSample> {
    if cloud.frame() != Frame::Base {
        return Err(Error::FrameMismatch {
            expected: Frame::Base,
            found: cloud.frame(),
        });
    }
    let c = centroid(cloud.points())?;
    let mut p = [c.x, c.y, c.z];
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config("grasp.sigma", e.to_string()))?;
        for v in &mut p {
            *v += normal.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma);
        }
    }
    let psi = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
    GraspSample::new(p, psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;

    fn cloud(pts: &[[f64; 3]], frame: Frame) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(), frame).unwrap()
    }

    #[test]
    fn identity_grasp_keeps_points_up_to_order() {
        let c = cloud(&[[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6], [0.7, -0.8, 0.9]], Frame::Camera(0));
        let s = GraspSample::new([0.0; 3], 0.0).unwrap();
        let id = RigidTransform::identity(Frame::Camera(0), Frame::Base);
        let out = to_grasp_frame(&c, &s, &id, &mut rng_for(1, 2)).unwrap();
        assert_eq!(out.frame(), Frame::Grasp);
        let mut a: Vec<[f64; 3]> = out.points().iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut b: Vec<[f64; 3]> = c.points().iter().map(|p| [p.x, p.y, p.z]).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn grasp_point_maps_to_origin_for_any_yaw() {
        for psi in [-1.5, -0.3, 0.0, 0.9, FRAC_PI_2] {
            let s = GraspSample::new([0.6, -0.1, 0.45], psi).unwrap();
            let c = cloud(&[s.p], Frame::Base);
            let id = RigidTransform::identity(Frame::Base, Frame::Base);
            let out = to_grasp_frame_ordered(&c, &s, &id).unwrap();
            assert!(out.points()[0].norm() < 1e-15);
        }
    }

    #[test]
    fn quarter_turn_by_hand() {
        // grasp x points along base +y, so base +x is grasp -y
        let s = GraspSample::new([0.0; 3], FRAC_PI_2).unwrap();
        let id = RigidTransform::identity(Frame::Base, Frame::Base);
        let out = to_grasp_frame_ordered(&cloud(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], Frame::Base), &s, &id).unwrap();
        let p = out.points();
        assert!((p[0] - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        assert!((p[1] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let fast = base_to_grasp(&[Vec3::new(1.0, 0.0, 0.0)], &s);
        assert!((fast[0] - p[0]).norm() < 1e-15);
    }

    #[test]
    fn inverse_recovers_the_cloud() {
        let c = cloud(&[[0.1, 0.2, 0.7], [-0.05, 0.01, 0.65]], Frame::Camera(3));
        let cam = RigidTransform::from_yaw(0.3, Vec3::new(0.2, 0.1, 1.0), Frame::Camera(3), Frame::Base);
        let s = GraspSample::new([0.5, 0.1, 0.4], -0.7).unwrap();
        let g = to_grasp_frame_ordered(&c, &s, &cam).unwrap();
        let back = g.transformed(&cam.inverse().compose(&s.pose()).unwrap()).unwrap();
        for (a, b) in back.points().iter().zip(c.points()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn frame_mismatch_is_an_error() {
        let c = cloud(&[[0.0, 0.0, 1.0]], Frame::Camera(1));
        let cam = RigidTransform::identity(Frame::Camera(2), Frame::Base);
        let s = GraspSample::new([0.0; 3], 0.0).unwrap();
        assert!(matches!(
            to_grasp_frame(&c, &s, &cam, &mut rng_for(0, 0)),
            Err(Error::FrameMismatch { .. })
        ));
    }

    #[test]
    fn heuristic_without_noise_hits_the_centroid() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.2, 0.4, 0.6]], Frame::Base);
        let s = heuristic_sample(&c, 0.0, &mut rng_for(3, 3)).unwrap();
        assert_eq!(s.p, [0.1, 0.2, 0.3]);
        assert!(matches!(centroid(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn heuristic_yaw_statistics() {
        let c = cloud(&[[0.5, 0.0, 0.4]], Frame::Base);
        let mut rng = rng_for(11, 0);
        let n = 10_000;
        let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let s = heuristic_sample(&c, 0.02, &mut rng).unwrap();
            sum += s.psi;
            lo = lo.min(s.psi);
            hi = hi.max(s.psi);
            for k in 0..3 {
                assert!((s.p[k] - c.points()[0][k]).abs() <= 0.06 + 1e-12);
            }
        }
        assert!(lo >= -FRAC_PI_2 && hi <= FRAC_PI_2);
        // uniform on [-pi/2, pi/2] has standard deviation pi / sqrt(12)
        let se = std::f64::consts::PI / 12f64.sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64).abs() < 3.0 * se);
    }
}
