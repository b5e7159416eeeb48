use serde::{Deserialize, Serialize};

use super::sample::{base_to_grasp, GraspSample, GripperModel};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scenesim::{Episode, Scene};

/// A scene plus dense surface samples of every object, world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspWorld {
    pub scene: Scene,
    pub surfaces: Vec<(u32, Vec<Vec3>)>,
}

impl GraspWorld {
    pub fn from_episode(ep: &Episode) -> Result<Self> {
        let surfaces = ep
            .scene
            .objects
            .iter()
            .map(|o| {
                let c = ep.gt_cloud(o.instance_id)?;
                Ok((
                    o.instance_id,
                    c.points.iter().map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scene: ep.scene.clone(),
            surfaces,
        })
    }

    pub fn surface(&self, id: u32) -> Result<&[Vec3]> {
        self.surfaces
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, p)| p.as_slice())
            .ok_or(Error::UnknownInstance(id))
    }

    pub fn without(&self, id: u32) -> Result<Self> {
        Ok(Self {
            scene: self.scene.without(id)?,
            surfaces: self.surfaces.iter().filter(|(i, _)| *i != id).cloned().collect(),
        })
    }
}

/// Why a grasp failed, or that it succeeded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleOutcome {
    Success,
    /// The gripper's descent from the pre-grasp pose hits the table or an object.
    Collision,
    /// Another object sits between the fingers.
    Obstructed,
    /// No target surface between the fingers.
    NoContact,
    /// The target spans at least the jaw opening.
    TooWide,
    /// The two contact patches do not face each other.
    NotAntipodal,
    /// Contact only at the very fingertips.
    ShallowContact,
}

impl OracleOutcome {
    pub fn is_success(self) -> bool {
        self == OracleOutcome::Success
    }
}

/// Minimum surface samples per contact patch.
const MIN_CONTACT_POINTS: usize = 3;

#[derive(Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Aabb {
    fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }
}

/// Grasp-frame volumes swept by the fingers and palm between the pre-grasp
/// and grasp poses.
fn swept_volumes(g: &GripperModel) -> [Aabb; 3] {
    let (hw, fw, t, l, dh) = (
        0.5 * g.jaw_width,
        0.5 * g.finger_width,
        g.finger_thickness,
        g.finger_length,
        g.pre_grasp_height,
    );
    [
        Aabb {
            lo: [-fw, -hw - t, 0.0],
            hi: [fw, -hw, l + dh],
        },
        Aabb {
            lo: [-fw, hw, 0.0],
            hi: [fw, hw + t, l + dh],
        },
        Aabb {
            lo: [-fw, -hw - t, l],
            hi: [fw, hw + t, l + t + dh],
        },
    ]
}

/// Geometric stand-in for executing the grasp: descend from the pre-grasp
/// pose, close the jaws, lift.
pub fn grasp_oracle_outcome(world: &GraspWorld, target: u32, s: &GraspSample, g: &GripperModel) -> Result<OracleOutcome> {
    g.validate()?;
    let target_obj = world.scene.object(target)?;
    let target_pts = world.surface(target)?;
    let hw = 0.5 * g.jaw_width;
    let fw = 0.5 * g.finger_width;
    let reach = (fw * fw + (hw + g.finger_thickness).powi(2)).sqrt();
    let vols = swept_volumes(g);

    // the fingertips are the lowest part of the gripper
    if s.p[2] < 0.0 {
        return Ok(OracleOutcome::Collision);
    }
    if s.p[2] < world.scene.table_height {
        let (c, sn) = (s.psi.cos(), s.psi.sin());
        for (x, y) in [(-fw, -hw - g.finger_thickness), (fw, hw + g.finger_thickness), (-fw, hw + g.finger_thickness), (fw, -hw - g.finger_thickness)] {
            let wx = s.p[0] + c * x - sn * y;
            let wy = s.p[1] + sn * x + c * y;
            if world.scene.on_table(wx, wy) {
                return Ok(OracleOutcome::Collision);
            }
        }
    }

    let closing = Aabb {
        lo: [-fw, -hw, 0.0],
        hi: [fw, hw, g.finger_length],
    };
    let pos = s.position();
    for (id, pts) in &world.surfaces {
        let obj = world.scene.object(*id)?;
        let (center, radius) = obj.bounding_sphere();
        let dxy = ((center.x - pos.x).powi(2) + (center.y - pos.y).powi(2)).sqrt();
        if dxy > reach + radius + 1e-9 {
            continue;
        }
        let local = base_to_grasp(pts, s);
        if local.iter().any(|p| vols.iter().any(|v| v.contains(p))) {
            return Ok(OracleOutcome::Collision);
        }
        if *id != target && local.iter().any(|p| closing.contains(p)) {
            return Ok(OracleOutcome::Obstructed);
        }
    }
    let _ = target_obj;

    let between: Vec<Vec3> = base_to_grasp(target_pts, s)
        .into_iter()
        .filter(|p| closing.contains(p))
        .collect();
    if between.is_empty() {
        return Ok(OracleOutcome::NoContact);
    }
    let y_min = between.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y_max = between.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    if y_max - y_min >= g.jaw_width {
        return Ok(OracleOutcome::TooWide);
    }
    let tol = g.finger_thickness;
    let patch = |keep: &dyn Fn(&Vec3) -> bool| -> Option<Vec3> {
        let sel: Vec<&Vec3> = between.iter().filter(|p| keep(p)).collect();
        (sel.len() >= MIN_CONTACT_POINTS).then(|| sel.iter().copied().sum::<Vec3>() / sel.len() as f64)
    };
    let (Some(left), Some(right)) = (patch(&|p| p.y <= y_min + tol), patch(&|p| p.y >= y_max - tol)) else {
        return Ok(OracleOutcome::NoContact);
    };
    let dxz = ((left.x - right.x).powi(2) + (left.z - right.z).powi(2)).sqrt();
    if dxz > fw {
        return Ok(OracleOutcome::NotAntipodal);
    }
    let zc = 0.5 * (left.z + right.z);
    if zc < g.finger_thickness || zc > g.finger_length {
        return Ok(OracleOutcome::ShallowContact);
    }
    Ok(OracleOutcome::Success)
}

pub fn grasp_oracle(world: &GraspWorld, target: u32, s: &GraspSample, g: &GripperModel) -> Result<bool> {
    Ok(grasp_oracle_outcome(world, target, s, g)?.is_success())
}
