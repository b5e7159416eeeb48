use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::scenesim::ViewLabel;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeLossWeights {
    pub bbox: f64,
    pub mask: f64,
    pub reg: f64,
    pub huber_delta: f64,
    /// Weight of the penalty on points in front of `z_min`.
    pub clamp: f64,
    pub z_min: f64,
    /// Length unit of the 3D Chamfer term, meters.
    pub chamfer_unit: f64,
    /// Cap on mask pixels and label points used per view.
    pub max_targets: usize,
}

impl Default for ShapeLossWeights {
    fn default() -> Self {
        Self {
            bbox: 1.0,
            mask: 1.0,
            reg: 1e-4,
            huber_delta: 1.0,
            clamp: 100.0,
            z_min: 0.05,
            chamfer_unit: 0.01,
            max_targets: 256,
        }
    }
}

impl ShapeLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.bbox", self.bbox),
            ("loss.mask", self.mask),
            ("loss.reg", self.reg),
            ("loss.clamp", self.clamp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        if !(self.huber_delta > 0.0) || !(self.z_min > 0.0) || !(self.chamfer_unit > 0.0) {
            return Err(Error::config("loss.huber_delta", "must be > 0"));
        }
        if self.max_targets == 0 {
            return Err(Error::config("loss.max_targets", "must be >= 1"));
        }
        Ok(())
    }
}

/// Evenly spaced subsample of at most `cap` items, in order.
pub fn subsample<T: Copy>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap]).collect()
}

/// Everything the loss needs from one supervising view.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionView {
    /// Source camera to this view's camera, row-major rotation.
    pub rot: [f64; 9],
    pub trans: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    /// Label box `(u_mid, v_mid, w, h)`.
    pub bbox: [f64; 4],
    pub mask_pixels: Vec<[f64; 2]>,
    /// Label partial cloud in this view's camera frame.
    pub label_points: Vec<[f64; 3]>,
}

impl SupervisionView {
    /// `source_pose` and `view_pose` map the world into the two cameras.
    pub fn new(
        source_pose: &RigidTransform,
        view_pose: &RigidTransform,
        intrinsics: CameraIntrinsics,
        label: &ViewLabel,
        max_targets: usize,
    ) -> Result<Self> {
        let t = view_pose.compose(&source_pose.inverse())?;
        let r = t.to_rows();
        let cloud = label
            .partial_cloud
            .as_ref()
            .ok_or(Error::EmptyInput("label partial cloud"))?;
        let pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect();
        Ok(Self {
            rot: [r[0], r[1], r[2], r[4], r[5], r[6], r[8], r[9], r[10]],
            trans: [r[3], r[7], r[11]],
            intrinsics,
            bbox: label.bbox.to_array(),
            mask_pixels: subsample(&label.mask_pixels, max_targets),
            label_points: subsample(&pts, max_targets),
        })
    }
}

/// Loss node plus the unweighted value of each term.
#[derive(Clone, Copy, Debug)]
pub struct ShapeLoss {
    pub total: Var,
    pub bbox: f64,
    pub mask: f64,
    pub clamp: f64,
    pub reg: f64,
}

/// Multi-view reprojection loss of a predicted cloud `pred: [K, 3]` in the
/// source camera frame. `params` are the tensors whose squared norm is
/// regularized; pass none to leave the regularizer to the caller.
pub fn shape_loss(
    tape: &mut Tape<'_>,
    pred: Var,
    views: &[SupervisionView],
    w: &ShapeLossWeights,
    params: &[Var],
) -> Result<ShapeLoss> {
    if views.is_empty() {
        return Err(Error::EmptyInput("supervision views"));
    }
    let mut terms: Vec<Var> = Vec::new();
    let (mut bbox_sum, mut mask_sum, mut clamp_sum) = (0.0, 0.0, 0.0);
    for v in views {
        let y = tape.rigid_apply(pred, &v.rot, &v.trans)?;
        let k = &v.intrinsics;
        let uv = tape.project(y, k.fx, k.fy, k.cx, k.cy, w.z_min)?;
        let pen = tape.depth_penalty(y, w.z_min)?;
        clamp_sum += tape.value(pen).item()?;
        terms.push(tape.scale(pen, w.clamp));
        let bb = tape.tight_bbox(uv)?;
        let lb = tape.huber(bb, &v.bbox, w.huber_delta)?;
        bbox_sum += tape.value(lb).item()?;
        terms.push(tape.scale(lb, w.bbox));
        let c2 = tape.chamfer2d(uv, &v.mask_pixels)?;
        let c3 = tape.chamfer3d_from_labels(y, &v.label_points, w.chamfer_unit)?;
        let lm = tape.add(c2, c3)?;
        mask_sum += tape.value(lm).item()?;
        terms.push(tape.scale(lm, w.mask));
    }
    let mut reg_sum = 0.0;
    for &p in params {
        let s = tape.sum_squares(p);
        reg_sum += tape.value(s).item()?;
        terms.push(tape.scale(s, w.reg));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(ShapeLoss {
        total,
        bbox: bbox_sum,
        mask: mask_sum,
        clamp: clamp_sum,
        reg: reg_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(260.0, 260.0, 63.5, 47.5, 128, 96).unwrap()
    }

    fn identity_view(label_points: Vec<[f64; 3]>, mask_pixels: Vec<[f64; 2]>, bbox: [f64; 4]) -> SupervisionView {
        SupervisionView {
            rot: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            trans: [0.0; 3],
            intrinsics: intr(),
            bbox,
            mask_pixels,
            label_points,
        }
    }

    #[test]
    fn label_term_vanishes_on_the_label_cloud() {
        let pts = vec![[0.01, 0.0, 0.6], [-0.02, 0.01, 0.62], [0.0, -0.015, 0.61]];
        let v = identity_view(pts.clone(), vec![[64.0, 48.0]], [64.0, 48.0, 10.0, 10.0]);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![3, 3], pts.iter().flatten().copied().collect()).unwrap());
        let y = tape.rigid_apply(x, &v.rot, &v.trans).unwrap();
        let c3 = tape.chamfer3d_from_labels(y, &v.label_points, 0.01).unwrap();
        assert_eq!(tape.value(c3).item().unwrap(), 0.0);
    }

    #[test]
    fn regularizer_only() {
        let w = ShapeLossWeights {
            bbox: 0.0,
            mask: 0.0,
            reg: 1.0,
            clamp: 0.0,
            ..ShapeLossWeights::default()
        };
        let v = identity_view(vec![[0.0, 0.0, 0.5]], vec![[1.0, 2.0]], [1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.6, -0.1, 0.0, 0.7]).unwrap());
        let theta = tape.variable(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let l = shape_loss(&mut tape, x, &[v], &w, &[theta]).unwrap();
        assert!((tape.value(l.total).item().unwrap() - 5.25).abs() < 1e-12);
    }

    #[test]
    fn points_behind_the_camera_stay_finite() {
        let v = identity_view(vec![[0.0, 0.0, 0.5]], vec![[60.0, 40.0], [70.0, 50.0]], [65.0, 45.0, 10.0, 10.0]);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![2, 3], vec![0.1, 0.2, -0.3, -0.1, 0.0, 0.0]).unwrap());
        let l = shape_loss(&mut tape, x, &[v], &ShapeLossWeights::default(), &[]).unwrap();
        assert!(tape.value(l.total).item().unwrap().is_finite());
        assert!(l.clamp > 0.0);
        let g = tape.backward(l.total).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
    }
}
