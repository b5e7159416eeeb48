use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::{grasp_oracle, GraspWorld};
use super::sample::{heuristic_sample, GraspSample, GripperModel};
use crate::cem::{observe_target, CloudSource};
use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud, RigidTransform, Vec3};
use crate::scenesim::{label_view, CropConfig, DatasetReader, DatasetWriter, Episode, Snapshot};
use crate::seeds::{derive_seed, rng_for};
use crate::shapepred::ShapeNetModel;

pub const GRASP_SCHEMA: &str = "grasp-object";
pub const GRASP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspDataConfig {
    pub samples_per_object: usize,
    /// Position noise of the heuristic policy, meters.
    pub sigma: f64,
    pub gripper: GripperModel,
    pub crop: CropConfig,
    /// Leading views of each episode that stand for the real camera.
    pub ring_views: usize,
    /// Pixels the target needs in the chosen view.
    pub min_pixels: usize,
    /// Label with ground-truth clouds instead of the shape model.
    pub oracle_cloud: bool,
}

impl Default for GraspDataConfig {
    fn default() -> Self {
        Self {
            samples_per_object: 8,
            sigma: 0.02,
            gripper: GripperModel::default(),
            crop: CropConfig::default(),
            ring_views: 5,
            min_pixels: 20,
            oracle_cloud: false,
        }
    }
}

impl GraspDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_object == 0 {
            return Err(Error::config("grasp_data.samples_per_object", "must be >= 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("grasp_data.sigma", "must be >= 0"));
        }
        if self.ring_views == 0 {
            return Err(Error::config("grasp_data.ring_views", "must be >= 1"));
        }
        self.gripper.validate()
    }
}

/// Ring views ordered from the middle outward.
pub fn view_order(ring_views: usize) -> Vec<u16> {
    let mid = (ring_views - 1) / 2;
    let mut out = vec![mid as u16];
    for d in 1..=ring_views {
        if mid + d < ring_views {
            out.push((mid + d) as u16);
        }
        if d <= mid {
            out.push((mid - d) as u16);
        }
    }
    out
}

/// First view in [`view_order`] where the target shows at least
/// `min_pixels` pixels with some valid depth and does not touch the border.
pub fn choose_view<'a>(snapshots: &'a [Snapshot], target: u32, ring_views: usize, min_pixels: usize) -> Result<Option<&'a Snapshot>> {
    for v in view_order(ring_views.min(snapshots.len())) {
        let snap = &snapshots[v as usize];
        if let Some(l) = label_view(snap, target)? {
            if l.pixel_count() >= min_pixels && l.partial_cloud.is_some() && !l.touches_border {
                return Ok(Some(snap));
            }
        }
    }
    Ok(None)
}

/// Both clouds of one object as seen from one view, camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectClouds {
    pub episode_seed: u64,
    pub instance_id: u32,
    pub view: u16,
    pub camera_to_base: RigidTransform,
    /// Predicted (or ground-truth) full cloud.
    pub full: Vec<[f32; 3]>,
    /// Masked depth backprojection.
    pub partial: Vec<[f32; 3]>,
}

impl ObjectClouds {
    fn to_base(&self, pts: &[[f32; 3]]) -> Vec<Vec3> {
        pts.iter()
            .map(|p| self.camera_to_base.apply(&Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)))
            .collect()
    }

    pub fn full_base(&self) -> Vec<Vec3> {
        self.to_base(&self.full)
    }

    pub fn partial_base(&self) -> Vec<Vec3> {
        self.to_base(&self.partial)
    }
}

/// One labeled heuristic grasp on the object `clouds[object]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspEpisodeRecord {
    pub object: usize,
    pub sample: GraspSample,
    pub success: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraspDataset {
    pub clouds: Vec<ObjectClouds>,
    pub records: Vec<GraspEpisodeRecord>,
}

impl GraspDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }
}

fn to_camera(points: &[Vec3], camera_to_base: &RigidTransform) -> Vec<[f32; 3]> {
    let inv = camera_to_base.inverse();
    points
        .iter()
        .map(|p| {
            let q = inv.apply(p);
            [q.x as f32, q.y as f32, q.z as f32]
        })
        .collect()
}

fn episode_records(
    ep: &Episode,
    model: Option<&ShapeNetModel>,
    cfg: &GraspDataConfig,
    seed: u64,
) -> Result<Vec<(ObjectClouds, Vec<(GraspSample, bool)>)>> {
    let world = GraspWorld::from_episode(ep)?;
    let mut out = Vec::new();
    for obj in &ep.scene.objects {
        let id = obj.instance_id;
        let Some(snap) = choose_view(&ep.snapshots, id, cfg.ring_views, cfg.min_pixels)? else {
            continue;
        };
        let source = match (cfg.oracle_cloud, model) {
            (true, _) => CloudSource::Oracle(&world),
            (false, Some(m)) => CloudSource::Predicted { model: m, crop: &cfg.crop },
            (false, None) => return Err(Error::config("grasp_data.oracle_cloud", "no shape model given")),
        };
        let full = observe_target(source, snap, id)?.points;
        let partial = observe_target(CloudSource::Sensed, snap, id)?.points;
        let base = PointCloud::new(full.clone(), Frame::Base)?;
        let mut rng = rng_for(derive_seed(seed, ep.seed), id as u64);
        let mut samples = Vec::with_capacity(cfg.samples_per_object);
        for _ in 0..cfg.samples_per_object {
            let s = heuristic_sample(&base, cfg.sigma, &mut rng)?;
            samples.push((s, grasp_oracle(&world, id, &s, &cfg.gripper)?));
        }
        let to_base = snap.camera_to_base();
        out.push((
            ObjectClouds {
                episode_seed: ep.seed,
                instance_id: id,
                view: snap.view_index,
                full: to_camera(&full, &to_base),
                partial: to_camera(&partial, &to_base),
                camera_to_base: to_base,
            },
            samples,
        ));
    }
    Ok(out)
}

/// Heuristic grasps on every observable object, labeled by the oracle.
/// Parallel over episodes; the result does not depend on thread count.
pub fn gen_grasp_dataset(
    episodes: &[Episode],
    model: Option<&ShapeNetModel>,
    cfg: &GraspDataConfig,
    seed: u64,
) -> Result<GraspDataset> {
    cfg.validate()?;
    let per_episode = episodes
        .par_iter()
        .map(|ep| episode_records(ep, model, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut data = GraspDataset::default();
    for (clouds, samples) in per_episode.into_iter().flatten() {
        let object = data.clouds.len();
        data.clouds.push(clouds);
        data.records.extend(samples.into_iter().map(|(sample, success)| GraspEpisodeRecord {
            object,
            sample,
            success,
        }));
    }
    let rate = data.success_rate();
    if !data.is_empty() && (rate == 0.0 || rate == 1.0) {
        log::warn!("grasp dataset has a single class (success rate {rate})");
    }
    log::info!("grasp dataset: {} records, success rate {:.3}", data.len(), rate);
    Ok(data)
}

#[derive(Serialize, Deserialize)]
struct StoredObject {
    schema: String,
    version: u32,
    episode_seed: u64,
    instance_id: u32,
    view: u16,
    camera_to_base: RigidTransform,
    full: crate::scenesim::BlobRef,
    partial: crate::scenesim::BlobRef,
    grasps: Vec<(GraspSample, bool)>,
}

pub fn write_grasp_dataset(dir: &Path, data: &GraspDataset) -> Result<()> {
    let mut w = DatasetWriter::create(dir)?;
    for (i, c) in data.clouds.iter().enumerate() {
        let flat = |p: &[[f32; 3]]| p.iter().flatten().copied().collect::<Vec<f32>>();
        let full = w.push_f32(&flat(&c.full))?;
        let partial = w.push_f32(&flat(&c.partial))?;
        w.write_record(&StoredObject {
            schema: GRASP_SCHEMA.into(),
            version: GRASP_VERSION,
            episode_seed: c.episode_seed,
            instance_id: c.instance_id,
            view: c.view,
            camera_to_base: c.camera_to_base.clone(),
            full,
            partial,
            grasps: data
                .records
                .iter()
                .filter(|r| r.object == i)
                .map(|r| (r.sample, r.success))
                .collect(),
        })?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_grasp_dataset(dir: &Path) -> Result<GraspDataset> {
    let r = DatasetReader::open(dir)?;
    let stored: Vec<StoredObject> = r.records(GRASP_SCHEMA, GRASP_VERSION)?;
    let mut data = GraspDataset::default();
    for s in stored {
        let unflat = |v: Vec<f32>| v.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>();
        let object = data.clouds.len();
        data.clouds.push(ObjectClouds {
            episode_seed: s.episode_seed,
            instance_id: s.instance_id,
            view: s.view,
            camera_to_base: s.camera_to_base,
            full: unflat(r.read_f32(s.full)?),
            partial: unflat(r.read_f32(s.partial)?),
        });
        data.records.extend(s.grasps.into_iter().map(|(sample, success)| GraspEpisodeRecord {
            object,
            sample,
            success,
        }));
    }
    Ok(data)
}
