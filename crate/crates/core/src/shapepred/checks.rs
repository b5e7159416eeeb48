//! Finite-difference check of the complete shape objective: network,
//! rigid transform, projection, box and Chamfer terms and regularizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::loss::{shape_loss, ShapeLossWeights, SupervisionView};
use super::model::{ShapeInput, ShapeNetConfig, ShapeNetModel};
use crate::error::Result;
use crate::geometry::CameraIntrinsics;
use crate::scenesim::{Crop, CropWindow, CROP_CHANNELS};
use crate::seeds::rng_for;
use crate::tensor::gradcheck::{check, GradCheckReport, FD_EPS};
use crate::tensor::{BoundParams, Tensor, Var};

/// A network small enough for element-wise finite differences, emitting a
/// three-point cloud.
pub fn tiny_config() -> ShapeNetConfig {
    ShapeNetConfig {
        in_height: 8,
        in_width: 8,
        channels: [2, 2, 2],
        latent: 3,
        cond_hidden: 2,
        hidden: 4,
        points: 3,
        ..ShapeNetConfig::default()
    }
}

fn small_rotation(rng: &mut ChaCha8Rng) -> [f64; 9] {
    let axis = nalgebra::Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rot = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.05..0.3));
    let m = rot.matrix();
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
}

/// A supervising view whose targets sit a few pixels (and about a
/// centimeter) away from where `pred` lands, so every term is active
/// without dwarfing the finite-difference resolution.
fn random_view(rng: &mut ChaCha8Rng, pred: &[[f64; 3]], rot: [f64; 9], trans: [f64; 3]) -> SupervisionView {
    let intrinsics = CameraIntrinsics::new(260.0, 260.0, 63.5, 47.5, 128, 96).expect("valid intrinsics");
    let cam: Vec<[f64; 3]> = pred
        .iter()
        .map(|p| {
            let r = |i: usize| rot[3 * i] * p[0] + rot[3 * i + 1] * p[1] + rot[3 * i + 2] * p[2] + trans[i];
            [r(0), r(1), r(2)]
        })
        .collect();
    let uv: Vec<[f64; 2]> = cam.iter().map(|c| [260.0 * c[0] / c[2] + 63.5, 260.0 * c[1] / c[2] + 47.5]).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in &uv {
        for a in 0..2 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    let mut jitter = |s: f64| rng.random_range(-s..s);
    let bbox = [
        0.5 * (lo[0] + hi[0]) + jitter(0.6),
        0.5 * (lo[1] + hi[1]) + jitter(0.6),
        (hi[0] - lo[0]) + jitter(0.6),
        (hi[1] - lo[1]) + jitter(0.6),
    ];
    let mask_pixels = (0..5).map(|i| [uv[i % uv.len()][0] + jitter(0.8), uv[i % uv.len()][1] + jitter(0.8)]).collect();
    let label_points = (0..4)
        .map(|i| {
            let c = cam[i % cam.len()];
            [c[0] + jitter(0.003), c[1] + jitter(0.003), c[2] + jitter(0.003)]
        })
        .collect();
    SupervisionView {
        rot,
        trans,
        intrinsics,
        bbox,
        mask_pixels,
        label_points,
    }
}

/// A random crop, a randomly weighted tiny network and two supervising
/// views (the source view and a second, rotated camera).
pub fn composite_case(seed: u64) -> Result<(ShapeNetModel, ShapeInput, Vec<SupervisionView>)> {
    let mut rng = rng_for(seed, 0xC0C0);
    let cfg = tiny_config();
    let mut model = ShapeNetModel::new(cfg.clone(), seed)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let t = model.params.get_mut(&name)?;
        let scale = if name == "dec.out.w" { 0.05 } else { 0.5 };
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    let n = cfg.in_height * cfg.in_width;
    let mut data: Vec<f32> = (0..CROP_CHANNELS * n).map(|_| rng.random::<f32>()).collect();
    for v in &mut data[3 * n..4 * n] {
        *v = 0.55 + 0.1 * *v;
    }
    for v in &mut data[4 * n..] {
        *v = if *v > 0.4 { 1.0 } else { 0.0 };
    }
    let crop = Crop {
        data,
        height: cfg.in_height,
        width: cfg.in_width,
        intrinsics: CameraIntrinsics::new(90.0, 90.0, 2.0, 4.5, 8, 8)?,
        window: CropWindow {
            u0: 60.0,
            u1: 83.0,
            v0: 40.0,
            v1: 63.0,
        },
        scale_u: 8.0 / 23.0,
        scale_v: 8.0 / 23.0,
    };
    let input = ShapeInput::from_crop(&crop)?;
    let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let pred = model.predict_points(&input)?;
    let first = random_view(&mut rng, &pred, identity, [0.0; 3]);
    let rot = small_rotation(&mut rng);
    let trans = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.05];
    let views = vec![first, random_view(&mut rng, &pred, rot, trans)];
    Ok((model, input, views))
}

/// Gradient of the full objective (with the regularizer over every
/// parameter) with respect to every parameter, against central differences.
pub fn composite_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let (model, input, views) = composite_case(seed)?;
    let weights = ShapeLossWeights {
        reg: 1e-2,
        ..ShapeLossWeights::default()
    };
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    check(&tensors, FD_EPS, |tape, vars: &[Var]| {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let pred = model.forward(tape, &bound, &input)?;
        Ok(shape_loss(tape, pred, &views, &weights, vars)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::FD_TOL;

    #[test]
    fn full_objective_matches_finite_differences() {
        for seed in 0..4 {
            let r = composite_gradcheck(seed).unwrap();
            assert!(r.passes(FD_TOL), "seed {seed}: {r:?}");
            assert!(r.checked > 50);
        }
    }
}
