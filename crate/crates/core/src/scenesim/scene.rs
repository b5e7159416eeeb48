use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::primitives::{Axis, Hit, PrimitiveObject, ShapeKind, Solid};
use crate::error::{Error, Result};
use crate::geometry::{Frame, RigidTransform, Vec3};

/// Scene layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub table_height_min: f64,
    pub table_height_max: f64,
    /// Center of the table top, world x/y.
    pub table_center: [f64; 2],
    /// Half extents of the table top.
    pub table_half: [f64; 2],
    /// Object origins are drawn uniformly from this square around the
    /// table center.
    pub region_half: f64,
    /// Minimum clearance between object footprints.
    pub footprint_gap: f64,
    /// Placement attempts per object before the layout is restarted.
    pub placement_attempts: usize,
    /// Layout restarts before giving up.
    pub layout_restarts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 4,
            max_objects: 5,
            table_height_min: 0.30,
            table_height_max: 0.50,
            table_center: [0.65, 0.0],
            table_half: [0.35, 0.5],
            region_half: 0.105,
            footprint_gap: 0.01,
            placement_attempts: 200,
            layout_restarts: 60,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("scene.min_objects", "need 1 <= min_objects <= max_objects"));
        }
        if !(self.table_height_min > 0.0 && self.table_height_min <= self.table_height_max) {
            return Err(Error::config("scene.table_height_min", "need 0 < min <= max"));
        }
        if !(self.region_half > 0.0) || self.table_half.iter().any(|h| !(*h > self.region_half)) {
            return Err(Error::config("scene.region_half", "placement region must lie inside the table"));
        }
        if self.footprint_gap < 0.0 {
            return Err(Error::config("scene.footprint_gap", "must be >= 0"));
        }
        if self.placement_attempts == 0 || self.layout_restarts == 0 {
            return Err(Error::config("scene.placement_attempts", "must be >= 1"));
        }
        Ok(())
    }
}

/// A table top with objects resting on it. World frame = robot base frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub table_height: f64,
    pub table_center: [f64; 2],
    pub table_half: [f64; 2],
    pub objects: Vec<PrimitiveObject>,
}

/// What a world ray hits first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Object(u32),
    Table,
    Floor,
}

impl Scene {
    pub fn object(&self, id: u32) -> Result<&PrimitiveObject> {
        self.objects
            .iter()
            .find(|o| o.instance_id == id)
            .ok_or(Error::UnknownInstance(id))
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        self.objects.iter().map(|o| o.instance_id).collect()
    }

    /// Copy of the scene with one object removed.
    pub fn without(&self, id: u32) -> Result<Scene> {
        self.object(id)?;
        let mut s = self.clone();
        s.objects.retain(|o| o.instance_id != id);
        Ok(s)
    }

    pub fn on_table(&self, x: f64, y: f64) -> bool {
        (x - self.table_center[0]).abs() <= self.table_half[0] && (y - self.table_center[1]).abs() <= self.table_half[1]
    }

    /// Nearest surface along `o + t d` (`t > 0`), including table and floor.
    pub fn raycast(&self, o: &Vec3, d: &Vec3) -> Option<(Surface, Hit)> {
        let mut best: Option<(Surface, Hit)> = None;
        for obj in &self.objects {
            if let Some(h) = obj.intersect(o, d) {
                if best.is_none_or(|(_, b)| h.t < b.t) {
                    best = Some((Surface::Object(obj.instance_id), h));
                }
            }
        }
        if d.z.abs() > 1e-300 {
            let t = (self.table_height - o.z) / d.z;
            let p = o + d * t;
            if t > 0.0 && self.on_table(p.x, p.y) && best.is_none_or(|(_, b)| t < b.t) {
                best = Some((Surface::Table, Hit { t, normal: Vec3::z() }));
            }
            if best.is_none() {
                let t = -o.z / d.z;
                if t > 0.0 {
                    best = Some((Surface::Floor, Hit { t, normal: Vec3::z() }));
                }
            }
        }
        best
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Solids for one object with its lowest point at body `z = 0`.
fn make_parts(rng: &mut impl Rng) -> (ShapeKind, Vec<Solid>) {
    match rng.random_range(0..5u32) {
        0 => {
            let r = uniform(rng, 0.025, 0.038);
            (
                ShapeKind::Sphere,
                vec![Solid::Sphere {
                    center: [0.0, 0.0, r],
                    radius: r,
                }],
            )
        }
        1 => {
            let half = [uniform(rng, 0.015, 0.032), uniform(rng, 0.02, 0.05), uniform(rng, 0.02, 0.05)];
            (
                ShapeKind::Box,
                vec![Solid::Cuboid {
                    center: [0.0, 0.0, half[2]],
                    half,
                }],
            )
        }
        2 => {
            let radius = uniform(rng, 0.015, 0.034);
            let half_length = uniform(rng, 0.025, 0.06);
            (
                ShapeKind::Cylinder,
                vec![Solid::Cylinder {
                    center: [0.0, 0.0, half_length],
                    radius,
                    half_length,
                    axis: Axis::Z,
                }],
            )
        }
        3 => {
            let radius = uniform(rng, 0.018, 0.032);
            let half_length = uniform(rng, 0.03, 0.055);
            (
                ShapeKind::Cylinder,
                vec![Solid::Cylinder {
                    center: [0.0, 0.0, radius],
                    radius,
                    half_length,
                    axis: Axis::X,
                }],
            )
        }
        _ => composite(rng),
    }
}

fn composite(rng: &mut impl Rng) -> (ShapeKind, Vec<Solid>) {
    let mut parts = Vec::with_capacity(3);
    match rng.random_range(0..3u32) {
        0 => {
            // cylinder with a ball on top
            let radius = uniform(rng, 0.018, 0.03);
            let hl = uniform(rng, 0.02, 0.04);
            parts.push(Solid::Cylinder {
                center: [0.0, 0.0, hl],
                radius,
                half_length: hl,
                axis: Axis::Z,
            });
            let r = uniform(rng, 0.8, 1.15) * radius;
            parts.push(Solid::Sphere {
                center: [0.0, 0.0, 2.0 * hl + 0.6 * r],
                radius: r,
            });
        }
        1 => {
            // mug: cylinder with a side handle
            let radius = uniform(rng, 0.02, 0.032);
            let hl = uniform(rng, 0.03, 0.05);
            parts.push(Solid::Cylinder {
                center: [0.0, 0.0, hl],
                radius,
                half_length: hl,
                axis: Axis::Z,
            });
            let hx = uniform(rng, 0.008, 0.014);
            parts.push(Solid::Cuboid {
                center: [radius + hx - 0.002, 0.0, hl],
                half: [hx, 0.005, 0.6 * hl],
            });
        }
        _ => {
            // stacked blocks, optionally capped
            let lower = [uniform(rng, 0.02, 0.032), uniform(rng, 0.02, 0.04), uniform(rng, 0.012, 0.025)];
            parts.push(Solid::Cuboid {
                center: [0.0, 0.0, lower[2]],
                half: lower,
            });
            let upper = [
                uniform(rng, 0.5, 0.9) * lower[0],
                uniform(rng, 0.5, 0.9) * lower[1],
                uniform(rng, 0.012, 0.025),
            ];
            let z_up = 2.0 * lower[2] + upper[2];
            parts.push(Solid::Cuboid {
                center: [0.0, 0.0, z_up],
                half: upper,
            });
            if rng.random::<bool>() {
                let r = 0.8 * upper[0].min(upper[1]);
                parts.push(Solid::Sphere {
                    center: [0.0, 0.0, z_up + upper[2] + 0.5 * r],
                    radius: r,
                });
            }
        }
    }
    (ShapeKind::Composite, parts)
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    let h = uniform(rng, 0.0, 6.0);
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let s = uniform(rng, 0.5, 0.9);
    [0.15 + s * r * 0.8, 0.15 + s * g * 0.8, 0.15 + s * b * 0.8]
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table_height = uniform(&mut rng, cfg.table_height_min, cfg.table_height_max);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let shapes: Vec<(ShapeKind, Vec<Solid>, [f64; 3])> = (0..count)
        .map(|_| {
            let (k, p) = make_parts(&mut rng);
            (k, p, random_color(&mut rng))
        })
        .collect();
    let mut attempts = 0;
    for _ in 0..cfg.layout_restarts {
        let mut objects: Vec<PrimitiveObject> = Vec::with_capacity(count);
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        for (i, (kind, parts, color)) in shapes.iter().enumerate() {
            let id = i as u32 + 1;
            let mut ok = false;
            for _ in 0..cfg.placement_attempts {
                attempts += 1;
                let yaw = uniform(&mut rng, 0.0, 2.0 * PI);
                let x = cfg.table_center[0] + uniform(&mut rng, -cfg.region_half, cfg.region_half);
                let y = cfg.table_center[1] + uniform(&mut rng, -cfg.region_half, cfg.region_half);
                let pose = RigidTransform::from_yaw(yaw, Vec3::new(x, y, table_height), Frame::Object(id), Frame::Base);
                let obj = PrimitiveObject::new(id, *kind, parts.clone(), pose, *color);
                let r = obj.footprint_radius();
                if placed
                    .iter()
                    .all(|&(px, py, pr)| (px - x).hypot(py - y) >= pr + r + cfg.footprint_gap)
                {
                    placed.push((x, y, r));
                    objects.push(obj);
                    ok = true;
                    break;
                }
            }
            if !ok {
                break;
            }
        }
        if objects.len() == count {
            return Ok(Scene {
                table_height,
                table_center: cfg.table_center,
                table_half: cfg.table_half,
                objects,
            });
        }
    }
    Err(Error::Placement { count, attempts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(9, &cfg).unwrap(), generate_scene(9, &cfg).unwrap());
        assert_ne!(generate_scene(9, &cfg).unwrap(), generate_scene(10, &cfg).unwrap());
    }

    #[test]
    fn thousand_seeds_respect_table_and_count() {
        let cfg = SceneConfig::default();
        for seed in 0..1000 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!((0.30..=0.50).contains(&s.table_height));
            assert!((4..=5).contains(&s.objects.len()));
        }
    }

    #[test]
    fn objects_rest_on_table_without_overlap() {
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            for (i, o) in s.objects.iter().enumerate() {
                assert!(o.is_valid());
                let (lo, _) = o.local_bounds();
                assert!(lo.z.abs() < 1e-12);
                let lowest = o.pose.apply(&Vec3::new(0.0, 0.0, lo.z)).z;
                assert!((lowest - s.table_height).abs() < 1e-6);
                for p in &s.objects[i + 1..] {
                    let d = (o.pose.translation() - p.pose.translation()).xy().norm();
                    assert!(d >= o.footprint_radius() + p.footprint_radius());
                }
            }
        }
    }

    #[test]
    fn crowded_config_reports_placement_error() {
        let cfg = SceneConfig {
            min_objects: 5,
            region_half: 0.01,
            placement_attempts: 5,
            layout_restarts: 2,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(1, &cfg), Err(Error::Placement { .. })));
    }
}
