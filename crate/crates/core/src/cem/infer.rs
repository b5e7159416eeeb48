use rayon::prelude::*;

use super::{cem_optimize, CemConfig, CemResult, Constraint};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::grasp::{centroid, critic_input, CriticModel, GraspSample, GraspWorld};
use crate::scenesim::{crop, label_view, CropConfig, Snapshot};
use crate::seeds::{derive_seed, rng_for};
use crate::shapepred::ShapeNetModel;

/// Where the robot's picture of the target comes from.
#[derive(Clone, Copy, Debug)]
pub enum CloudSource<'a> {
    /// Shape-network prediction from the view's crop.
    Predicted {
        model: &'a ShapeNetModel,
        crop: &'a CropConfig,
    },
    /// Masked depth backprojection of the view.
    Sensed,
    /// Ground-truth surface samples.
    Oracle(&'a GraspWorld),
}

/// Base-frame points describing the target, from one snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub view: u16,
    pub points: Vec<Vec3>,
}

/// Ground-truth samples kept by the oracle source.
const ORACLE_POINTS: usize = 1024;

/// Observes `target` in `snap`. Fails with a coverage error when the
/// target has no valid pixels in the view.
pub fn observe_target(source: CloudSource<'_>, snap: &Snapshot, target: u32) -> Result<Observation> {
    let to_base = snap.camera_to_base();
    let points = match source {
        CloudSource::Oracle(world) => {
            let all = world.surface(target)?;
            let n = all.len();
            (0..ORACLE_POINTS.min(n)).map(|i| all[i * n / ORACLE_POINTS.min(n)]).collect()
        }
        CloudSource::Predicted { model, crop: cfg } => {
            let label = label_view(snap, target)?.ok_or(Error::Coverage(target))?;
            let c = crop(snap, &label.bbox, target, cfg)?;
            model.predict_cloud(&c, snap.view_index)?.transformed(&to_base)?.into_points()
        }
        CloudSource::Sensed => {
            let label = label_view(snap, target)?.ok_or(Error::Coverage(target))?;
            let cloud = label.partial_cloud.ok_or(Error::Coverage(target))?;
            cloud.transformed(&to_base)?.into_points()
        }
    };
    Ok(Observation {
        view: snap.view_index,
        points,
    })
}

/// CEM over the critic's score of `points` seen from each candidate,
/// started at the cloud centroid.
pub fn plan_grasp(
    points: &[Vec3],
    critic: &CriticModel,
    cfg: &CemConfig,
    constraints: &[&dyn Constraint],
    seed: u64,
) -> Result<CemResult> {
    let c = centroid(points)?;
    let init = GraspSample::new([c.x, c.y, c.z], 0.0)?;
    let mut round = 0u64;
    let scorer = |pop: &[GraspSample]| -> Result<Vec<f64>> {
        round += 1;
        let inputs = pop
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = rng_for(derive_seed(seed, round), i as u64);
                critic_input(points, s, critic.config.points, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let chunk = 25;
        let parts = inputs
            .par_chunks(chunk)
            .map(|b| critic.predict(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    };
    cem_optimize(scorer, &init, cfg, constraints, &mut rng_for(seed, 0xCE))
}

/// Observes the target, then runs [`plan_grasp`].
pub fn infer_grasp(
    source: CloudSource<'_>,
    snap: &Snapshot,
    target: u32,
    critic: &CriticModel,
    cfg: &CemConfig,
    constraints: &[&dyn Constraint],
    seed: u64,
) -> Result<CemResult> {
    let obs = observe_target(source, snap, target)?;
    plan_grasp(&obs.points, critic, cfg, constraints, seed)
}
