use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{Scene, Surface};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Frame, RigidTransform, Vec3};

/// Depth-sensor corruption: gaussian noise, then dropout holes (depth 0,
/// i.e. invalid), then quantization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorNoiseModel {
    pub sigma: f64,
    pub hole_probability: f64,
    /// Quantization step in meters; 0 disables quantization.
    pub quantization: f64,
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            hole_probability: 0.0,
            quantization: 0.0,
        }
    }
}

impl SensorNoiseModel {
    pub fn new(sigma: f64, hole_probability: f64, quantization: f64) -> Result<Self> {
        let m = Self {
            sigma,
            hole_probability,
            quantization,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("noise.sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.hole_probability) {
            return Err(Error::config("noise.hole_probability", "must lie in [0, 1]"));
        }
        if !(self.quantization >= 0.0 && self.quantization.is_finite()) {
            return Err(Error::config("noise.quantization", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma == 0.0 && self.hole_probability == 0.0 && self.quantization == 0.0
    }

    /// Corrupts a depth image in place.
    pub fn apply(&self, depth: &mut [f32], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for z in depth.iter_mut() {
            if *z <= 0.0 {
                continue;
            }
            let mut d = *z as f64;
            if self.sigma > 0.0 {
                d += self.sigma * normal.sample(&mut rng);
            }
            if self.hole_probability > 0.0 && rng.random::<f64>() < self.hole_probability {
                d = 0.0;
            }
            if self.quantization > 0.0 && d > 0.0 {
                d = (d / self.quantization).round() * self.quantization;
            }
            *z = if d > 0.0 { d as f32 } else { 0.0 };
        }
    }
}

/// Per-object pixel counts of one rendered view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectVisibility {
    pub instance_id: u32,
    /// Pixels where the object is the nearest surface.
    pub visible: u32,
    /// Pixels whose ray hits the object at all, ignoring occluders.
    pub silhouette: u32,
    /// Whether the unoccluded silhouette reaches the image border.
    pub touches_border: bool,
}

impl ObjectVisibility {
    pub fn ratio(&self) -> f64 {
        if self.silhouette == 0 {
            0.0
        } else {
            self.visible as f64 / self.silhouette as f64
        }
    }
}

/// One RGBD + instance-mask observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub view_index: u16,
    /// World (robot base) to camera.
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    /// Row-major `height x width`, meters; 0 marks an invalid reading.
    pub depth: Vec<f32>,
    /// Row-major `height x width x 3`, values in [0, 1].
    pub color: Vec<f32>,
    /// Row-major `height x width`; 0 is background, otherwise instance id.
    pub mask: Vec<u32>,
    pub visibility: Vec<ObjectVisibility>,
}

impl Snapshot {
    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    /// Camera to world (`T_R^C`).
    pub fn camera_to_base(&self) -> RigidTransform {
        self.pose.inverse()
    }

    pub fn visibility_of(&self, id: u32) -> Option<&ObjectVisibility> {
        self.visibility.iter().find(|v| v.instance_id == id)
    }

    /// Instances present in the mask, ascending.
    pub fn instances_in_view(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.visibility.iter().filter(|v| v.visible > 0).map(|v| v.instance_id).collect();
        ids.sort_unstable();
        ids
    }
}

const LIGHT: [f64; 3] = [0.3, -0.2, 0.93];
const TABLE_COLOR: [f64; 3] = [0.55, 0.45, 0.35];
const FLOOR_COLOR: [f64; 3] = [0.25, 0.25, 0.28];

/// Noiseless analytic render of `scene` from `pose` (world to camera).
pub fn render(scene: &Scene, view_index: u16, pose: &RigidTransform, intrinsics: &CameraIntrinsics) -> Result<Snapshot> {
    intrinsics.validate()?;
    if pose.from_frame() != Frame::Base {
        return Err(Error::FrameMismatch {
            expected: Frame::Base,
            found: pose.from_frame(),
        });
    }
    let pose = pose.clone().with_frames(Frame::Base, Frame::Camera(view_index));
    let cam_to_world = pose.inverse();
    let origin = *cam_to_world.translation();
    for o in &scene.objects {
        if o.sdf(&origin) <= 0.0 {
            return Err(Error::config("camera", "camera lies inside an object"));
        }
    }
    let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
    let light = Vec3::from(LIGHT).normalize();
    let mut depth = vec![0.0f32; w * h];
    let mut color = vec![0.0f32; w * h * 3];
    let mut mask = vec![0u32; w * h];
    let mut vis: Vec<ObjectVisibility> = scene
        .objects
        .iter()
        .map(|o| ObjectVisibility {
            instance_id: o.instance_id,
            visible: 0,
            silhouette: 0,
            touches_border: false,
        })
        .collect();
    for i in 0..h {
        for j in 0..w {
            let ray_cam = intrinsics.ray(j as f64, i as f64);
            let d = cam_to_world.apply_vector(&ray_cam);
            let border = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
            let mut best: Option<(usize, f64, Vec3)> = None;
            for (k, o) in scene.objects.iter().enumerate() {
                if let Some(hit) = o.intersect(&origin, &d) {
                    vis[k].silhouette += 1;
                    vis[k].touches_border |= border;
                    if best.is_none_or(|(_, t, _)| hit.t < t) {
                        best = Some((k, hit.t, hit.normal));
                    }
                }
            }
            let (t, normal, albedo, id) = match best {
                Some((k, t, n)) => (t, n, scene.objects[k].color, scene.objects[k].instance_id),
                None => match scene.raycast(&origin, &d) {
                    Some((Surface::Table, hit)) => (hit.t, hit.normal, TABLE_COLOR, 0),
                    Some((_, hit)) => (hit.t, hit.normal, FLOOR_COLOR, 0),
                    None => (0.0, Vec3::z(), [0.0; 3], 0),
                },
            };
            let px = i * w + j;
            // rays have unit camera-z, so t is the depth
            depth[px] = t as f32;
            mask[px] = id;
            if id != 0 {
                let k = scene.objects.iter().position(|o| o.instance_id == id).expect("hit object exists");
                vis[k].visible += 1;
            }
            let shade = 0.3 + 0.7 * normal.dot(&light).max(0.0);
            for c in 0..3 {
                color[px * 3 + c] = (albedo[c] * shade) as f32;
            }
        }
    }
    Ok(Snapshot {
        view_index,
        pose,
        intrinsics: *intrinsics,
        depth,
        color,
        mask,
        visibility: vis,
    })
}

/// Render followed by sensor noise seeded with `noise_seed`.
pub fn render_noisy(
    scene: &Scene,
    view_index: u16,
    pose: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    noise: Option<&SensorNoiseModel>,
    noise_seed: u64,
) -> Result<Snapshot> {
    let mut snap = render(scene, view_index, pose, intrinsics)?;
    if let Some(n) = noise {
        n.validate()?;
        n.apply(&mut snap.depth, noise_seed);
    }
    Ok(snap)
}

/// Camera placement around the table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    /// Number of ring views on the robot side.
    pub ring_views: usize,
    /// Angular span of the ring, degrees.
    pub ring_arc_deg: f64,
    /// Azimuth of the ring center around the table center, degrees
    /// (180 = on the robot side, looking along +x).
    pub ring_center_deg: f64,
    /// Add views spaced evenly over the rest of the circle.
    pub virtual_views: usize,
    pub eye_height_min: f64,
    pub eye_height_max: f64,
    /// Horizontal distance from the table center.
    pub distance_min: f64,
    pub distance_max: f64,
    /// Look-at point height above the table top.
    pub look_height: f64,
    /// Uniform azimuth jitter per view, degrees.
    pub azimuth_jitter_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            fx: 260.0,
            fy: 260.0,
            ring_views: 5,
            ring_arc_deg: 120.0,
            ring_center_deg: 180.0,
            virtual_views: 4,
            eye_height_min: 0.9,
            eye_height_max: 1.2,
            distance_min: 0.38,
            distance_max: 0.48,
            look_height: 0.03,
            azimuth_jitter_deg: 4.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ring_views == 0 {
            return Err(Error::config("camera.ring_views", "must be >= 1"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera.width", "image size must be non-zero"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("camera.fx", "focal lengths must be > 0"));
        }
        if !(self.eye_height_min <= self.eye_height_max && self.distance_min > 0.0 && self.distance_min <= self.distance_max) {
            return Err(Error::config("camera.distance_min", "ranges must be ordered and positive"));
        }
        Ok(())
    }

    pub fn total_views(&self) -> usize {
        self.ring_views + self.virtual_views
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    /// Azimuths (degrees) of ring then virtual views.
    pub fn azimuths(&self) -> Vec<f64> {
        let n = self.ring_views;
        let step = if n > 1 { self.ring_arc_deg / (n - 1) as f64 } else { 0.0 };
        let start = self.ring_center_deg - self.ring_arc_deg / 2.0;
        let mut az: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
        if self.virtual_views > 0 {
            let rest = 360.0 - self.ring_arc_deg;
            let gap = rest / (self.virtual_views + 1) as f64;
            let end = start + self.ring_arc_deg;
            az.extend((1..=self.virtual_views).map(|i| (end + gap * i as f64).rem_euclid(360.0)));
        }
        az
    }

    /// World-to-camera poses for every view of a scene.
    pub fn poses(&self, scene: &Scene, rng: &mut impl Rng) -> Result<Vec<RigidTransform>> {
        self.validate()?;
        let c = scene.table_center;
        let target = Vec3::new(c[0], c[1], scene.table_height + self.look_height);
        self.azimuths()
            .into_iter()
            .enumerate()
            .map(|(i, az)| {
                let jitter = self.azimuth_jitter_deg * (2.0 * rng.random::<f64>() - 1.0);
                let a = (az + jitter).to_radians();
                let dist = self.distance_min + (self.distance_max - self.distance_min) * rng.random::<f64>();
                let z = self.eye_height_min + (self.eye_height_max - self.eye_height_min) * rng.random::<f64>();
                let eye = Vec3::new(c[0] + dist * a.cos(), c[1] + dist * a.sin(), z);
                let cam = Frame::Camera(i as u16);
                Ok(RigidTransform::look_at(eye, target, Vec3::z(), cam, Frame::Base)?.inverse())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject;
    use crate::scenesim::primitives::{PrimitiveObject, ShapeKind, Solid};
    use crate::scenesim::scene::{generate_scene, SceneConfig};

    fn empty_scene() -> Scene {
        Scene {
            table_height: 0.4,
            table_center: [0.65, 0.0],
            table_half: [0.35, 0.5],
            objects: vec![],
        }
    }

    #[test]
    fn sphere_on_axis_center_depth() {
        // camera at the world origin looking along +z: pose is the identity
        let mut scene = empty_scene();
        scene.table_height = -10.0;
        let body = RigidTransform::translation_only(Vec3::new(0.0, 0.0, 1.0), Frame::Object(1), Frame::Base);
        scene.objects.push(PrimitiveObject::new(
            1,
            ShapeKind::Sphere,
            vec![Solid::Sphere {
                center: [0.0; 3],
                radius: 0.2,
            }],
            body,
            [1.0, 0.0, 0.0],
        ));
        let intr = CameraIntrinsics::new(1000.0, 1000.0, 5.0, 5.0, 11, 11).unwrap();
        let pose = RigidTransform::identity(Frame::Base, Frame::Camera(0));
        let snap = render(&scene, 0, &pose, &intr).unwrap();
        assert!((snap.depth[5 * 11 + 5] as f64 - 0.8).abs() < 1e-6);
        assert_eq!(snap.mask[5 * 11 + 5], 1);
    }

    #[test]
    fn empty_scene_mask_is_background() {
        let cfg = CameraConfig::default();
        let scene = empty_scene();
        let poses = cfg.poses(&scene, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let snap = render(&scene, 0, &poses[0], &cfg.intrinsics()).unwrap();
        assert!(snap.mask.iter().all(|&m| m == 0));
        assert!(snap.depth.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn masked_depth_backprojects_onto_surfaces() {
        let cfg = CameraConfig::default();
        let scene = generate_scene(3, &SceneConfig::default()).unwrap();
        let poses = cfg.poses(&scene, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let intr = cfg.intrinsics();
        for (v, pose) in poses.iter().enumerate() {
            let snap = render(&scene, v as u16, pose, &intr).unwrap();
            let pixels: Vec<([f64; 3], u32)> = snap
                .mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m != 0)
                .map(|(px, &m)| {
                    let (i, j) = (px / snap.width(), px % snap.width());
                    ([j as f64, i as f64, snap.depth[px] as f64], m)
                })
                .collect();
            let uvz: Vec<[f64; 3]> = pixels.iter().map(|p| p.0).collect();
            let cloud = backproject(&uvz, &intr, Frame::Camera(v as u16)).unwrap();
            let world = cloud.transformed(&snap.camera_to_base()).unwrap();
            for (p, (_, id)) in world.points().iter().zip(&pixels) {
                // f32 depth storage bounds the error
                let d = scene.object(*id).unwrap().sdf(p).abs();
                assert!(d < 1e-6 * 4.0, "{d}");
            }
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let cfg = CameraConfig::default();
        let scene = generate_scene(4, &SceneConfig::default()).unwrap();
        let poses = cfg.poses(&scene, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let clean = render(&scene, 0, &poses[0], &cfg.intrinsics()).unwrap();
        let zero = SensorNoiseModel::default();
        let noisy = render_noisy(&scene, 0, &poses[0], &cfg.intrinsics(), Some(&zero), 77).unwrap();
        assert_eq!(clean, noisy);
    }

    #[test]
    fn noise_makes_holes_and_quantizes() {
        let mut depth = vec![1.0f32; 10_000];
        let m = SensorNoiseModel::new(0.005, 0.02, 0.001).unwrap();
        m.apply(&mut depth, 5);
        let holes = depth.iter().filter(|&&d| d == 0.0).count();
        assert!((100..=300).contains(&holes), "{holes}");
        for &d in depth.iter().filter(|&&d| d > 0.0) {
            let q = d as f64 / 0.001;
            assert!((q - q.round()).abs() < 1e-3);
        }
        assert!(SensorNoiseModel::new(-1.0, 0.0, 0.0).is_err());
        assert!(SensorNoiseModel::new(0.0, 1.5, 0.0).is_err());
    }

    #[test]
    fn azimuths_cover_ring_and_virtual_views() {
        let az = CameraConfig::default().azimuths();
        let expect = [120.0, 150.0, 180.0, 210.0, 240.0, 288.0, 336.0, 24.0, 72.0];
        for (a, e) in az.iter().zip(expect) {
            assert!((a - e).abs() < 1e-9, "{az:?}");
        }
    }
}
