use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Frame, RigidTransform, Vec3};

/// Ray parameters below this are treated as starting on the surface.
const T_MIN: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two coordinates orthogonal to the axis.
    fn radial(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

/// A convex solid in an object's body frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Solid {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned in the body frame.
    Cuboid { center: [f64; 3], half: [f64; 3] },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_length: f64,
        axis: Axis,
    },
}

/// Nearest ray intersection: parameter `t` and outward unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn unit(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

fn nearer(best: Option<Hit>, t: f64, normal: Vec3) -> Option<Hit> {
    if t <= T_MIN {
        return best;
    }
    match best {
        Some(h) if h.t <= t => Some(h),
        _ => Some(Hit { t, normal }),
    }
}

impl Solid {
    pub fn center(&self) -> Vec3 {
        match self {
            Solid::Sphere { center, .. } | Solid::Cuboid { center, .. } | Solid::Cylinder { center, .. } => v(*center),
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.center().iter().all(|c| c.is_finite());
        finite
            && match self {
                Solid::Sphere { radius, .. } => *radius > 0.0,
                Solid::Cuboid { half, .. } => half.iter().all(|h| *h > 0.0),
                Solid::Cylinder {
                    radius, half_length, ..
                } => *radius > 0.0 && *half_length > 0.0,
            }
    }

    /// Body-frame axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let c = self.center();
        let ext = match self {
            Solid::Sphere { radius, .. } => Vec3::repeat(*radius),
            Solid::Cuboid { half, .. } => v(*half),
            Solid::Cylinder {
                radius,
                half_length,
                axis,
                ..
            } => {
                let mut e = Vec3::repeat(*radius);
                e[axis.index()] = *half_length;
                e
            }
        };
        (c - ext, c + ext)
    }

    pub fn area(&self) -> f64 {
        match self {
            Solid::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Solid::Cuboid { half, .. } => 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]),
            Solid::Cylinder {
                radius, half_length, ..
            } => 4.0 * PI * radius * half_length + 2.0 * PI * radius * radius,
        }
    }

    /// Exact signed distance (negative inside).
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let q = p - self.center();
        match self {
            Solid::Sphere { radius, .. } => q.norm() - radius,
            Solid::Cuboid { half, .. } => {
                let d = q.abs() - v(*half);
                d.map(|x| x.max(0.0)).norm() + d.max().min(0.0)
            }
            Solid::Cylinder {
                radius,
                half_length,
                axis,
                ..
            } => {
                let (i, j) = axis.radial();
                let dr = q[i].hypot(q[j]) - radius;
                let da = q[axis.index()].abs() - half_length;
                dr.max(0.0).hypot(da.max(0.0)) + dr.max(da).min(0.0)
            }
        }
    }

    /// First intersection of `o + t d` with `t > 0`; `d` need not be unit.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let q = o - self.center();
        match self {
            Solid::Sphere { radius, .. } => {
                let a = d.dot(d);
                let b = q.dot(d);
                let c = q.dot(&q) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let mut best = None;
                for t in [(-b - s) / a, (-b + s) / a] {
                    best = nearer(best, t, (q + d * t) / *radius);
                }
                best
            }
            Solid::Cuboid { half, .. } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                let mut n_enter = Vec3::zeros();
                let mut n_exit = Vec3::zeros();
                for k in 0..3 {
                    if d[k].abs() < 1e-300 {
                        if q[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (-half[k] - q[k]) / d[k];
                    let t1 = (half[k] - q[k]) / d[k];
                    let (near, far, sign) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
                    if near > t_enter {
                        t_enter = near;
                        n_enter = Vec3::zeros();
                        n_enter[k] = sign;
                    }
                    if far < t_exit {
                        t_exit = far;
                        n_exit = Vec3::zeros();
                        n_exit[k] = -sign;
                    }
                }
                if t_enter > t_exit {
                    return None;
                }
                nearer(nearer(None, t_enter, n_enter), t_exit, n_exit)
            }
            Solid::Cylinder {
                radius,
                half_length,
                axis,
                ..
            } => {
                let (i, j) = axis.radial();
                let ax = axis.index();
                let mut best = None;
                let a = d[i] * d[i] + d[j] * d[j];
                if a > 1e-300 {
                    let b = q[i] * d[i] + q[j] * d[j];
                    let c = q[i] * q[i] + q[j] * q[j] - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let p = q + d * t;
                            if p[ax].abs() <= *half_length {
                                let mut n = Vec3::zeros();
                                n[i] = p[i] / radius;
                                n[j] = p[j] / radius;
                                best = nearer(best, t, n);
                            }
                        }
                    }
                }
                if d[ax].abs() > 1e-300 {
                    for sign in [-1.0, 1.0] {
                        let t = (sign * half_length - q[ax]) / d[ax];
                        let p = q + d * t;
                        if p[i] * p[i] + p[j] * p[j] <= radius * radius {
                            let mut n = Vec3::zeros();
                            n[ax] = sign;
                            best = nearer(best, t, n);
                        }
                    }
                }
                best
            }
        }
    }

    /// Uniform sample over the surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        let c = self.center();
        match self {
            Solid::Sphere { radius, .. } => {
                let n = loop {
                    let g = Vec3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    );
                    if let Some(u) = g.try_normalize(1e-12) {
                        break u;
                    }
                };
                c + n * *radius
            }
            Solid::Cuboid { half, .. } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total = 2.0 * faces.iter().sum::<f64>();
                let mut pick = unit(rng) * total;
                let mut k = 2;
                let mut sign = 1.0;
                'outer: for (axis, &a) in faces.iter().enumerate() {
                    for s in [-1.0, 1.0] {
                        if pick < a {
                            k = axis;
                            sign = s;
                            break 'outer;
                        }
                        pick -= a;
                    }
                }
                let mut p = Vec3::zeros();
                for m in 0..3 {
                    p[m] = if m == k {
                        sign * half[m]
                    } else {
                        (2.0 * unit(rng) - 1.0) * half[m]
                    };
                }
                c + p
            }
            Solid::Cylinder {
                radius,
                half_length,
                axis,
                ..
            } => {
                let (i, j) = axis.radial();
                let ax = axis.index();
                let side = 4.0 * PI * radius * half_length;
                let cap = PI * radius * radius;
                let pick = unit(rng) * (side + 2.0 * cap);
                let mut p = Vec3::zeros();
                if pick < side {
                    let th = 2.0 * PI * unit(rng);
                    p[i] = radius * th.cos();
                    p[j] = radius * th.sin();
                    p[ax] = (2.0 * unit(rng) - 1.0) * half_length;
                } else {
                    let r = radius * unit(rng).sqrt();
                    let th = 2.0 * PI * unit(rng);
                    p[i] = r * th.cos();
                    p[j] = r * th.sin();
                    p[ax] = if pick < side + cap { -half_length } else { *half_length };
                }
                c + p
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Composite,
}

/// One rigid object: a union of up to three solids in its body frame,
/// whose lowest point sits at body `z = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveObject {
    pub instance_id: u32,
    pub kind: ShapeKind,
    pub parts: Vec<Solid>,
    /// Body frame to world (robot base) frame.
    pub pose: RigidTransform,
    pub color: [f64; 3],
}

impl PrimitiveObject {
    pub fn new(instance_id: u32, kind: ShapeKind, parts: Vec<Solid>, pose: RigidTransform, color: [f64; 3]) -> Self {
        Self {
            instance_id,
            kind,
            parts,
            pose: pose.with_frames(Frame::Object(instance_id), Frame::Base),
            color,
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.parts.is_empty() && self.parts.len() <= 3 && self.parts.iter().all(Solid::is_valid)
    }

    /// Body-frame bounds over all parts.
    pub fn local_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.parts {
            let (a, b) = p.bounds();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        (lo, hi)
    }

    /// Radius of the horizontal disc around the body origin that contains
    /// the object.
    pub fn footprint_radius(&self) -> f64 {
        let (lo, hi) = self.local_bounds();
        let x = lo.x.abs().max(hi.x.abs());
        let y = lo.y.abs().max(hi.y.abs());
        x.hypot(y)
    }

    /// World-frame bounding sphere `(center, radius)`.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let (lo, hi) = self.local_bounds();
        let c = (lo + hi) * 0.5;
        (self.pose.apply(&c), (hi - lo).norm() * 0.5)
    }

    /// Signed distance of a world point to the union of parts.
    pub fn sdf(&self, world: &Vec3) -> f64 {
        let local = self.pose.inverse().apply(world);
        self.sdf_local(&local)
    }

    fn sdf_local(&self, p: &Vec3) -> f64 {
        self.parts.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Nearest hit of a world ray; the normal is returned in world frame.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let (c, r) = self.bounding_sphere();
        let a = d.dot(d);
        let q = o - c;
        let b = q.dot(d);
        if b * b - a * (q.dot(&q) - r * r) < 0.0 {
            return None;
        }
        let inv = self.pose.inverse();
        let (lo, ld) = (inv.apply(o), inv.apply_vector(d));
        let mut best: Option<Hit> = None;
        for s in &self.parts {
            if let Some(h) = s.intersect(&lo, &ld) {
                if best.is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        best.map(|h| Hit {
            t: h.t,
            normal: self.pose.apply_vector(&h.normal),
        })
    }

    /// `n` world-frame points distributed uniformly over the outer surface
    /// of the union (points buried inside another part are redrawn).
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let areas: Vec<f64> = self.parts.iter().map(Solid::area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut pick = unit(rng) * total;
            let mut idx = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            let p = self.parts[idx].sample_surface(rng);
            let buried = self
                .parts
                .iter()
                .enumerate()
                .any(|(k, s)| k != idx && s.sdf(&p) < -1e-9);
            if !buried {
                out.push(self.pose.apply(&p));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solids() -> Vec<Solid> {
        vec![
            Solid::Sphere {
                center: [0.1, -0.2, 0.3],
                radius: 0.05,
            },
            Solid::Cuboid {
                center: [0.0, 0.1, 0.2],
                half: [0.02, 0.04, 0.03],
            },
            Solid::Cylinder {
                center: [-0.1, 0.0, 0.1],
                radius: 0.03,
                half_length: 0.05,
                axis: Axis::Z,
            },
            Solid::Cylinder {
                center: [0.05, 0.05, 0.05],
                radius: 0.02,
                half_length: 0.04,
                axis: Axis::X,
            },
        ]
    }

    #[test]
    fn samples_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in solids() {
            for _ in 0..500 {
                let p = s.sample_surface(&mut rng);
                assert!(s.sdf(&p).abs() < 1e-12, "{s:?} {p:?}");
            }
        }
    }

    #[test]
    fn ray_hits_lie_on_surface_with_outward_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in solids() {
            let mut hits = 0;
            for _ in 0..2000 {
                let o = s.center() + Vec3::new(0.3, -0.2, 0.4);
                let target = s.center() + Vec3::from_fn(|_, _| rng.random_range(-0.06..0.06));
                let d = (target - o) * rng.random_range(0.5..2.0);
                if let Some(h) = s.intersect(&o, &d) {
                    hits += 1;
                    let p = o + d * h.t;
                    assert!(s.sdf(&p).abs() < 1e-9, "{s:?}");
                    assert!(h.normal.dot(&d) < 0.0);
                    assert!((h.normal.norm() - 1.0).abs() < 1e-9);
                    // nothing closer along the ray is inside the solid
                    assert!(s.sdf(&(o + d * (h.t * 0.999))) > 0.0);
                }
            }
            assert!(hits > 100);
        }
    }

    #[test]
    fn sphere_center_depth_closed_form() {
        let s = Solid::Sphere {
            center: [0.0, 0.0, 1.0],
            radius: 0.25,
        };
        let h = s.intersect(&Vec3::zeros(), &Vec3::z()).unwrap();
        assert!((h.t - 0.75).abs() < 1e-15);
    }

    #[test]
    fn box_area_and_sdf() {
        let s = Solid::Cuboid {
            center: [0.0; 3],
            half: [1.0, 2.0, 3.0],
        };
        assert!((s.area() - 8.0 * (2.0 + 6.0 + 3.0)).abs() < 1e-12);
        assert!((s.sdf(&Vec3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((s.sdf(&Vec3::zeros()) + 1.0).abs() < 1e-12);
    }
}
