use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::data::{ObjectRecord, ShapeDataset};
use super::model::ShapeNetModel;
use crate::error::Result;
use crate::geometry::{iou, BBox2D, CameraIntrinsics};

/// Mean IOUs over every (source view, target view) pair of every object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEval {
    pub bbox_iou: f64,
    pub mask_iou: f64,
    /// Pairs with source = target.
    pub same_view_iou: f64,
    /// Pairs with source != target.
    pub cross_view_iou: f64,
    pub pairs: usize,
}

/// Sums after sorting so the mean does not depend on dataset order.
fn stable_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn project_visible(points: &[[f64; 3]], k: &CameraIntrinsics) -> Vec<[f64; 2]> {
    points
        .iter()
        .filter(|p| p[2] > 1e-6)
        .map(|p| [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
        .collect()
}

fn bbox_of(uv: &[[f64; 2]]) -> Option<BBox2D> {
    let first = uv.first()?;
    let (mut u0, mut u1, mut v0, mut v1) = (first[0], first[0], first[1], first[1]);
    for p in uv {
        u0 = u0.min(p[0]);
        u1 = u1.max(p[0]);
        v0 = v0.min(p[1]);
        v1 = v1.max(p[1]);
    }
    Some(BBox2D::from_extents(u0, u1, v0, v1))
}

/// Projected points splatted with a 1 px radius (3x3 pixels) against the
/// mask pixel set.
pub fn mask_iou(uv: &[[f64; 2]], mask: &[[f64; 2]], width: u32, height: u32) -> f64 {
    let (w, h) = (width as i64, height as i64);
    let mut splat: HashSet<(i64, i64)> = HashSet::new();
    for p in uv {
        let (cu, cv) = (p[0].round(), p[1].round());
        if !cu.is_finite() || !cv.is_finite() || cu.abs() > 1e6 || cv.abs() > 1e6 {
            continue;
        }
        let (cu, cv) = (cu as i64, cv as i64);
        for dv in -1..=1 {
            for du in -1..=1 {
                let (u, v) = (cu + du, cv + dv);
                if u >= 0 && v >= 0 && u < w && v < h {
                    splat.insert((u, v));
                }
            }
        }
    }
    let truth: HashSet<(i64, i64)> = mask.iter().map(|p| (p[0] as i64, p[1] as i64)).collect();
    let inter = splat.intersection(&truth).count();
    let union = splat.len() + truth.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Evaluates any predictor mapping `(object, source view index)` to a cloud
/// in that view's camera frame.
pub fn eval_predictor<F>(data: &ShapeDataset, predict: F) -> Result<ShapeEval>
where
    F: Fn(&ObjectRecord, usize) -> Result<Vec<[f64; 3]>>,
{
    let (mut all, mut masks, mut same, mut cross) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for obj in &data.objects {
        for s in 0..obj.views.len() {
            let cloud = predict(obj, s)?;
            let src_to_world = obj.views[s].pose.inverse();
            for (t, view) in obj.views.iter().enumerate() {
                let rel = view.pose.compose(&src_to_world)?;
                let moved: Vec<[f64; 3]> = cloud
                    .iter()
                    .map(|p| {
                        let q = rel.apply(&crate::geometry::Vec3::new(p[0], p[1], p[2]));
                        [q.x, q.y, q.z]
                    })
                    .collect();
                let uv = project_visible(&moved, &view.intrinsics);
                let b = bbox_of(&uv).map_or(0.0, |bb| iou(&bb, &view.bbox));
                all.push(b);
                if s == t {
                    same.push(b);
                } else {
                    cross.push(b);
                }
                masks.push(mask_iou(&uv, &view.mask_pixels, view.intrinsics.width, view.intrinsics.height));
            }
        }
    }
    Ok(ShapeEval {
        pairs: all.len(),
        bbox_iou: stable_mean(all),
        mask_iou: stable_mean(masks),
        same_view_iou: stable_mean(same),
        cross_view_iou: stable_mean(cross),
    })
}

pub fn eval_shape_iou(model: &ShapeNetModel, data: &ShapeDataset) -> Result<ShapeEval> {
    eval_predictor(data, |obj, s| model.predict_points(&obj.views[s].input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{generate_episodes, EpisodeConfig};
    use crate::shapepred::data::ShapeDataConfig;

    fn dataset(seed: u64, n: usize) -> ShapeDataset {
        let cfg = EpisodeConfig {
            gt_points: 2048,
            ..EpisodeConfig::default()
        };
        let dc = ShapeDataConfig {
            min_visibility: 0.95,
            ..ShapeDataConfig::default()
        };
        ShapeDataset::build(&generate_episodes(seed, n, &cfg).unwrap(), &dc).unwrap()
    }

    #[test]
    fn oracle_cloud_scores_high_and_origin_scores_zero() {
        let data = dataset(500, 6);
        let oracle = eval_predictor(&data, |obj, s| Ok(obj.gt_in_view(s))).unwrap();
        assert!(oracle.bbox_iou >= 0.95, "{oracle:?}");
        assert!(oracle.mask_iou > 0.6, "{oracle:?}");
        let origin = eval_predictor(&data, |_, _| Ok(vec![[0.0, 0.0, 0.0]; 16])).unwrap();
        assert!(origin.bbox_iou < 1e-9 && origin.mask_iou < 1e-9, "{origin:?}");
    }

    #[test]
    fn mean_ignores_dataset_order() {
        let data = dataset(510, 3);
        let predict = |obj: &ObjectRecord, s: usize| {
            Ok(obj.gt_in_view(s).iter().map(|p| [p[0] + 0.01, p[1], p[2] * 1.05]).collect())
        };
        let a = eval_predictor(&data, predict).unwrap();
        let mut rev = data.clone();
        rev.objects.reverse();
        let b = eval_predictor(&rev, predict).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_iou_hand_case() {
        let mask = vec![[5.0, 5.0], [6.0, 5.0]];
        // splat of one point at (5, 5) covers 9 pixels, 2 of them masked
        let v = mask_iou(&[[5.2, 4.9]], &mask, 20, 20);
        assert!((v - 2.0 / 9.0).abs() < 1e-12);
    }
}
