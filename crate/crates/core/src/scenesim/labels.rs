use super::episode::Episode;
use super::render::Snapshot;
use crate::error::{Error, Result};
use crate::geometry::{backproject, BBox2D, Frame, PointCloud, Projection2D};

/// Self-supervision label of one object in one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewLabel {
    pub instance_id: u32,
    pub view: u16,
    /// Centers `(u, v)` of every mask pixel of the object.
    pub mask_pixels: Vec<[f64; 2]>,
    /// Tight box over the footprints of the mask pixels.
    pub bbox: BBox2D,
    /// Back-projected valid depth under the mask, view camera frame.
    /// `None` when every masked depth reading is invalid.
    pub partial_cloud: Option<PointCloud>,
    /// Pixel centers of the partial cloud's points, in the same order.
    pub projection: Projection2D,
    /// Visible fraction of the unoccluded silhouette.
    pub visibility: f64,
    /// The object's silhouette reaches the image border.
    pub touches_border: bool,
}

impl ViewLabel {
    pub fn pixel_count(&self) -> usize {
        self.mask_pixels.len()
    }

    /// Whether the view can supervise or evaluate this object.
    pub fn usable(&self, min_visibility: f64, min_pixels: usize) -> bool {
        !self.touches_border
            && self.visibility >= min_visibility
            && self.pixel_count() >= min_pixels
            && self.partial_cloud.is_some()
    }
}

/// All view labels of one object, ordered by view.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLabels {
    pub instance_id: u32,
    pub views: Vec<ViewLabel>,
}

impl ObjectLabels {
    pub fn view(&self, view: u16) -> Option<&ViewLabel> {
        self.views.iter().find(|l| l.view == view)
    }
}

/// Label of `id` in one snapshot, or `None` if the object is not visible.
pub fn label_view(snap: &Snapshot, id: u32) -> Result<Option<ViewLabel>> {
    let w = snap.width();
    let mut mask_pixels = Vec::new();
    let mut valid = Vec::new();
    for (px, &m) in snap.mask.iter().enumerate() {
        if m != id {
            continue;
        }
        let (u, v) = ((px % w) as f64, (px / w) as f64);
        mask_pixels.push([u, v]);
        let z = snap.depth[px] as f64;
        if z > 0.0 {
            valid.push([u, v, z]);
        }
    }
    if mask_pixels.is_empty() {
        return Ok(None);
    }
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &[u, v] in &mask_pixels {
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let bbox = BBox2D::from_extents(u0 - 0.5, u1 + 0.5, v0 - 0.5, v1 + 0.5);
    let partial_cloud = if valid.is_empty() {
        None
    } else {
        Some(backproject(&valid, &snap.intrinsics, Frame::Camera(snap.view_index))?)
    };
    let vis = snap.visibility_of(id);
    let on_border = mask_pixels.iter().any(|&[u, v]| {
        u == 0.0 || v == 0.0 || u as usize + 1 == w || v as usize + 1 == snap.height()
    });
    Ok(Some(ViewLabel {
        instance_id: id,
        view: snap.view_index,
        mask_pixels,
        bbox,
        partial_cloud,
        projection: Projection2D {
            points2d: valid.iter().map(|p| [p[0], p[1]]).collect(),
        },
        visibility: vis.map_or(1.0, |v| v.ratio()),
        touches_border: on_border || vis.is_some_and(|v| v.touches_border),
    }))
}

/// Per-object, per-view labels from the masks and depth of an episode.
/// Objects are associated across views by instance id.
pub fn make_labels(episode: &Episode) -> Result<Vec<ObjectLabels>> {
    episode
        .scene
        .objects
        .iter()
        .map(|o| {
            let views = episode
                .snapshots
                .iter()
                .filter_map(|s| label_view(s, o.instance_id).transpose())
                .collect::<Result<Vec<_>>>()?;
            if views.is_empty() {
                return Err(Error::Coverage(o.instance_id));
            }
            Ok(ObjectLabels {
                instance_id: o.instance_id,
                views,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::scenesim::episode::{generate_episode, EpisodeConfig};

    fn episode(seed: u64) -> Episode {
        let cfg = EpisodeConfig {
            gt_points: 64,
            ..EpisodeConfig::default()
        };
        generate_episode(seed, &cfg).unwrap()
    }

    #[test]
    fn bbox_spans_all_mask_pixels() {
        let ep = episode(21);
        for obj in make_labels(&ep).unwrap() {
            for l in &obj.views {
                for &[u, v] in &l.mask_pixels {
                    assert!(u - 0.5 >= l.bbox.u_min() && u + 0.5 <= l.bbox.u_max());
                    assert!(v - 0.5 >= l.bbox.v_min() && v + 0.5 <= l.bbox.v_max());
                }
                assert!(l.mask_pixels.iter().any(|p| p[0] - 0.5 == l.bbox.u_min()));
                assert!(l.mask_pixels.iter().any(|p| p[1] + 0.5 == l.bbox.v_max()));
            }
        }
    }

    #[test]
    fn partial_clouds_reproject_into_other_view_masks() {
        for seed in 30..34 {
            let ep = episode(seed);
            for obj in make_labels(&ep).unwrap() {
                for a in &obj.views {
                    let Some(cloud) = &a.partial_cloud else { continue };
                    let snap_a = ep.snapshot(a.view).unwrap();
                    for b in &obj.views {
                        if b.view == a.view {
                            continue;
                        }
                        let snap_b = ep.snapshot(b.view).unwrap();
                        let t = snap_b.pose.compose(&snap_a.camera_to_base()).unwrap();
                        let moved = cloud.transformed(&t).unwrap();
                        let proj = project(&moved, &snap_b.intrinsics).unwrap();
                        let (w, h) = (snap_b.width() as i64, snap_b.height() as i64);
                        let mut inside = 0;
                        let mut total = 0;
                        for (p, q) in proj.points2d.iter().zip(moved.points()) {
                            let (cu, cv) = (p[0].round() as i64, p[1].round() as i64);
                            if cu < 1 || cv < 1 || cu >= w - 1 || cv >= h - 1 {
                                continue;
                            }
                            total += 1;
                            // points of A hidden in B land on the occluder; count only
                            // pixels where B sees this object or its occluder
                            let hit = (-1..=1).any(|di| {
                                (-1..=1).any(|dj| {
                                    let px = ((cv + di) * w + cu + dj) as usize;
                                    snap_b.mask[px] == obj.instance_id
                                })
                            });
                            let z_pt = q.z;
                            let z_seen = snap_b.depth[(cv * w + cu) as usize] as f64;
                            if hit || z_seen < z_pt - 1e-3 {
                                inside += 1;
                            }
                        }
                        if total > 0 {
                            assert!(inside as f64 >= 0.99 * total as f64, "{inside}/{total}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn missing_object_is_coverage_error() {
        let mut ep = episode(40);
        let id = ep.scene.objects[0].instance_id;
        for s in &mut ep.snapshots {
            for m in &mut s.mask {
                if *m == id {
                    *m = 0;
                }
            }
        }
        assert!(matches!(make_labels(&ep), Err(Error::Coverage(i)) if i == id));
    }
}
