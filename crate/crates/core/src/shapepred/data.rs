use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{subsample, SupervisionView};
use super::model::ShapeInput;
use crate::error::{Error, Result};
use crate::geometry::{BBox2D, CameraIntrinsics, RigidTransform};
use crate::scenesim::{crop, label_view, CropConfig, Episode};
use crate::seeds::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDataConfig {
    pub crop: CropConfig,
    /// Views below this visible fraction are neither inputs nor labels.
    pub min_visibility: f64,
    pub min_pixels: usize,
    /// Cap on label points and mask pixels kept per view.
    pub max_targets: usize,
}

impl Default for ShapeDataConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            min_visibility: 0.9,
            min_pixels: 20,
            max_targets: 256,
        }
    }
}

/// One usable observation of an object: its network input and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedView {
    pub view: u16,
    /// World to camera.
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub bbox: BBox2D,
    /// Every mask pixel, for mask IOU.
    pub mask_pixels: Vec<[f64; 2]>,
    pub label_points: Vec<[f64; 3]>,
    pub input: ShapeInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub episode_seed: u64,
    pub instance_id: u32,
    /// Ground-truth surface samples in the world frame; used only by
    /// oracle predictors and the grasp oracle, never by training.
    pub gt_points: Vec<[f64; 3]>,
    pub views: Vec<PreparedView>,
}

impl ObjectRecord {
    /// Supervision for a cloud predicted in view `source`, from `targets`.
    pub fn supervision(&self, source: usize, targets: &[usize], max_targets: usize) -> Result<Vec<SupervisionView>> {
        let src = &self.views[source];
        targets
            .iter()
            .map(|&t| {
                let v = &self.views[t];
                let rel = v.pose.compose(&src.pose.inverse())?;
                let r = rel.to_rows();
                Ok(SupervisionView {
                    rot: [r[0], r[1], r[2], r[4], r[5], r[6], r[8], r[9], r[10]],
                    trans: [r[3], r[7], r[11]],
                    intrinsics: v.intrinsics,
                    bbox: v.bbox.to_array(),
                    mask_pixels: subsample(&v.mask_pixels, max_targets),
                    label_points: subsample(&v.label_points, max_targets),
                })
            })
            .collect()
    }

    /// Ground-truth cloud expressed in the camera of view `idx`.
    pub fn gt_in_view(&self, idx: usize) -> Vec<[f64; 3]> {
        let pose = &self.views[idx].pose;
        self.gt_points
            .iter()
            .map(|p| {
                let q = pose.apply(&crate::geometry::Vec3::new(p[0], p[1], p[2]));
                [q.x, q.y, q.z]
            })
            .collect()
    }
}

/// Objects with their usable views, flattened over episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeDataset {
    pub objects: Vec<ObjectRecord>,
}

impl ShapeDataset {
    pub fn build(episodes: &[Episode], cfg: &ShapeDataConfig) -> Result<Self> {
        let mut objects = Vec::new();
        for ep in episodes {
            for obj in &ep.scene.objects {
                let id = obj.instance_id;
                let mut views = Vec::new();
                for snap in &ep.snapshots {
                    let Some(label) = label_view(snap, id)? else { continue };
                    if !label.usable(cfg.min_visibility, cfg.min_pixels) {
                        continue;
                    }
                    let c = crop(snap, &label.bbox, id, &cfg.crop)?;
                    let cloud = label.partial_cloud.as_ref().ok_or(Error::EmptyInput("partial cloud"))?;
                    let pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect();
                    views.push(PreparedView {
                        view: snap.view_index,
                        pose: snap.pose.clone(),
                        intrinsics: snap.intrinsics,
                        bbox: label.bbox,
                        label_points: subsample(&pts, cfg.max_targets),
                        mask_pixels: label.mask_pixels,
                        input: ShapeInput::from_crop(&c)?,
                    });
                }
                if views.is_empty() {
                    continue;
                }
                let gt = ep.gt_cloud(id)?;
                objects.push(ObjectRecord {
                    episode_seed: ep.seed,
                    instance_id: id,
                    gt_points: gt.points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect(),
                    views,
                });
            }
        }
        Ok(Self { objects })
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn view_count(&self) -> usize {
        self.objects.iter().map(|o| o.views.len()).sum()
    }

    pub fn extend(&mut self, other: ShapeDataset) {
        self.objects.extend(other.objects);
    }
}

/// How many views per object supervise training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewRegime {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "full")]
    Full,
}

impl ViewRegime {
    pub const ALL: [ViewRegime; 4] = [ViewRegime::One, ViewRegime::Two, ViewRegime::Four, ViewRegime::Full];

    pub fn limit(self) -> Option<usize> {
        match self {
            ViewRegime::One => Some(1),
            ViewRegime::Two => Some(2),
            ViewRegime::Four => Some(4),
            ViewRegime::Full => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewRegime::One => "1",
            ViewRegime::Two => "2",
            ViewRegime::Four => "4",
            ViewRegime::Full => "full",
        }
    }
}

impl std::str::FromStr for ViewRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(ViewRegime::One),
            "2" => Ok(ViewRegime::Two),
            "4" => Ok(ViewRegime::Four),
            "full" => Ok(ViewRegime::Full),
            _ => Err(Error::config("views", format!("expected 1, 2, 4 or full, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for ViewRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One training example: predict from `source`, supervise with `targets`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeSample {
    pub object: usize,
    pub source: usize,
    pub targets: Vec<usize>,
}

/// Per object, a seeded subset of at most the regime's view count; every
/// view of the subset is both a source and a supervisor.
pub fn regime_samples(data: &ShapeDataset, regime: ViewRegime, seed: u64) -> Vec<ShapeSample> {
    let mut out = Vec::new();
    for (oi, obj) in data.objects.iter().enumerate() {
        let mut idx: Vec<usize> = (0..obj.views.len()).collect();
        let mut rng = rng_for(seed ^ obj.episode_seed.rotate_left(20), obj.instance_id as u64);
        idx.shuffle(&mut rng);
        if let Some(n) = regime.limit() {
            idx.truncate(n);
        }
        idx.sort_unstable();
        for &s in &idx {
            out.push(ShapeSample {
                object: oi,
                source: s,
                targets: idx.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{generate_episodes, EpisodeConfig};

    fn dataset() -> ShapeDataset {
        let cfg = EpisodeConfig {
            gt_points: 64,
            ..EpisodeConfig::default()
        };
        ShapeDataset::build(&generate_episodes(40, 3, &cfg).unwrap(), &ShapeDataConfig::default()).unwrap()
    }

    #[test]
    fn regimes_nest_and_respect_limits() {
        let data = dataset();
        assert!(data.len() >= 8);
        let counts: Vec<usize> = ViewRegime::ALL.iter().map(|r| regime_samples(&data, *r, 1).len()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        assert_eq!(counts[0], data.len());
        assert_eq!(counts[3], data.view_count());
        for s in regime_samples(&data, ViewRegime::Two, 1) {
            assert!(s.targets.len() <= 2 && s.targets.contains(&s.source));
        }
        assert_eq!(regime_samples(&data, ViewRegime::Four, 9), regime_samples(&data, ViewRegime::Four, 9));
    }

    #[test]
    fn regime_names_round_trip() {
        for r in ViewRegime::ALL {
            assert_eq!(r.name().parse::<ViewRegime>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.name()));
        }
        assert!("3".parse::<ViewRegime>().is_err());
    }

    #[test]
    fn supervision_of_the_source_view_is_the_identity() {
        let data = dataset();
        let obj = &data.objects[0];
        let sup = obj.supervision(0, &[0], 256).unwrap();
        let r = sup[0].rot;
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(r.iter().zip(eye).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(sup[0].trans.iter().all(|t| t.abs() < 1e-12));
    }
}
